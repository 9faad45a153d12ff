"""Occlusion and dataset-size ablations.

Each ablation returns its table as a list of row dicts and, given an output
directory, writes the same rows as line-delimited JSON and as a CSV ready
for plotting.
"""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

from ..toy_il import DemoDataset, subsample_dataset
from .checkpoint import Checkpoint, load_checkpoint
from .config import TrainConfig
from .training import evaluate, policy_from_checkpoint, resolve_dataset, train


def _write_table(rows: list[dict], out_dir, stem: str) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jsonl = "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    for suffix, text in ((".jsonl", jsonl), (".csv", buf.getvalue())):
        path = out_dir / (stem + suffix)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(text, encoding="utf-8")
        tmp.replace(path)


def run_occlusion_ablation(ckpt, rates, episodes: int = 100, seed: int = 0,
                           out_dir=None, execute: int | None = None) -> list[dict]:
    """Success rate of one trained policy under evaluation-time occlusion rates.

    ``ckpt`` is a Checkpoint or a path to one. Every rate uses the same
    episode seed, so rows differ only by the masking.
    """
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    policy = policy_from_checkpoint(ckpt)
    execute = ckpt.config.execute if execute is None else execute
    rows = []
    for rate in rates:
        res = evaluate(policy, ckpt.config.task, episodes, seed, float(rate), execute)
        rows.append({"rate": float(rate), "success_rate": res.success_rate, "episodes": episodes})
    if out_dir is not None and rows:
        _write_table(rows, out_dir, "occlusion")
    return rows


def run_datasize_ablation(cfg: TrainConfig, fractions, episodes: int = 100, seed: int = 0,
                          dataset: DemoDataset | None = None, out_dir=None) -> list[dict]:
    """Train one model per dataset fraction and evaluate each identically.

    Subsets share ``cfg.seed`` for both subsampling and training; rows come
    back sorted by ascending fraction.
    """
    cfg, dataset = resolve_dataset(cfg, dataset)
    rows = []
    for fraction in sorted(float(f) for f in fractions):
        subset = subsample_dataset(dataset, fraction, cfg.seed)
        result = train(cfg, subset)
        res = evaluate(result.policy, cfg.task, episodes, seed, 0.0, cfg.execute)
        rows.append({"fraction": fraction, "trajectories": len(subset),
                     "final_loss": result.metrics[-1]["loss"],
                     "success_rate": res.success_rate, "episodes": episodes})
    if out_dir is not None and rows:
        _write_table(rows, out_dir, "datasize")
    return rows
