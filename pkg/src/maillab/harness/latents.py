"""Export of pre-head token representations for offline visualisation."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..policy import BC_STEP
from ..toy_il import DemoDataset, make_windows
from .checkpoint import Checkpoint, load_checkpoint
from .training import policy_from_checkpoint, resolve_dataset


@dataclass
class LatentExport:
    index: np.ndarray            # (rows, 2): trajectory, step
    latents: np.ndarray          # (rows, model_dim)
    projection: np.ndarray | None = None
    explained_variance: np.ndarray | None = None


def pca_project(x: np.ndarray, k: int = 2):
    """Project rows onto the top-k principal axes.

    Each axis is sign-fixed so its largest-magnitude loading is positive.
    Returns (projection, axes, explained variance per axis).
    """
    x = np.asarray(x, dtype=np.float64)
    centered = x - x.mean(axis=0)
    _, sing, vt = np.linalg.svd(centered, full_matrices=False)
    axes = vt[:k]
    flip = np.sign(axes[np.arange(len(axes)), np.abs(axes).argmax(axis=1)])
    axes = axes * flip[:, None]
    var = sing[:k] ** 2 / max(len(x) - 1, 1)
    return centered @ axes.T, axes, var


def _latent_rows(ckpt: Checkpoint, dataset: DemoDataset, chunk: int = 256):
    net = policy_from_checkpoint(ckpt).net
    cfg = ckpt.config
    S, _, C = make_windows(dataset, cfg.K, cfg.J)
    out = []
    for lo in range(0, len(S), chunk):
        s = S[lo:lo + chunk]
        c = None if C is None else C[lo:lo + chunk]
        a = np.zeros((len(s), cfg.J, cfg.act_dim))
        feats = net.features(s, a, BC_STEP, c).data
        # the first action token is aligned with the current environment step
        out.append(feats[:, 0, :])
    index = np.array([(i, k) for i, tr in enumerate(dataset.trajectories) for k in range(tr.steps)],
                     dtype=np.int64).reshape(-1, 2)
    return index, np.concatenate(out)


def export_latents(ckpt, dataset, path, pca: bool = False) -> LatentExport:
    """Write one CSV row per trajectory step: ids, latent vector, optional 2-D PCA."""
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    if not isinstance(dataset, DemoDataset):
        dataset = DemoDataset.load(dataset)
    resolve_dataset(ckpt.config, dataset)
    index, latents = _latent_rows(ckpt, dataset)
    result = LatentExport(index, latents)
    header = ["trajectory", "step"] + [f"z{i}" for i in range(latents.shape[1])]
    table = np.concatenate([index.astype(np.float64), latents], axis=1)
    if pca:
        proj, _, var = pca_project(latents, 2)
        result.projection, result.explained_variance = proj, var
        header += ["pc1", "pc2"]
        table = np.concatenate([table, proj], axis=1)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row, (traj, step) in zip(table, index):
            writer.writerow([int(traj), int(step)] + [repr(float(v)) for v in row[2:]])
    tmp.replace(path)
    return result
