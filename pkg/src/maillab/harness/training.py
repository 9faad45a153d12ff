"""Seeded training loop, metrics stream and policy evaluation."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import tensor as T
from ..architectures import build_network, count_parameters
from ..policy import BCPolicy, DiffusionPolicy, SamplerOptions, make_noise_schedule
from ..toy_il import (DemoDataset, OcclusionConfig, RolloutResult, apply_occlusion, make_env,
                      make_windows, rollout_evaluate)
from .checkpoint import Checkpoint, save_checkpoint
from .config import ConfigError, TrainConfig
from .optim import AdamState, optimizer_step

METRICS_FILE = "metrics.jsonl"
CHECKPOINT_FILE = "final.ckpt"


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, batch index {batch}")
        self.epoch, self.batch, self.loss = epoch, batch, loss


@dataclass
class TrainResult:
    config: TrainConfig
    checkpoint: Checkpoint
    metrics: list[dict] = field(default_factory=list)
    policy: object = None


def make_policy(cfg: TrainConfig, net):
    scale = cfg.action_scale or 1.0
    if cfg.policy == "BC":
        return BCPolicy(net, action_scale=scale)
    sched = make_noise_schedule(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end)
    return DiffusionPolicy(net, sched, SamplerOptions(cfg.noise_rule, cfg.seed), scale)


def policy_from_checkpoint(ckpt: Checkpoint):
    net = build_network(ckpt.config.network_config())
    net.load_state_dict(ckpt.params)
    return make_policy(ckpt.config, net)


def resolve_dataset(cfg: TrainConfig, dataset: DemoDataset | None) -> tuple[TrainConfig, DemoDataset]:
    """Load the dataset if needed and fill in / check the config's dimensions."""
    if dataset is None:
        if not cfg.dataset:
            raise ConfigError("no dataset given")
        dataset = DemoDataset.load(cfg.dataset)
    dims = {"obs_dim": dataset.obs_dim, "act_dim": dataset.act_dim, "cond_dim": dataset.cond_dim}
    for key, val in dims.items():
        have = getattr(cfg, key)
        if have and have != val and not (key == "cond_dim" and have == 0):
            raise ConfigError(f"{key}={have} in config but dataset has {val}")
    if len(dataset) == 0:
        raise ConfigError("dataset is empty")
    if not cfg.action_scale:
        peak = max(float(np.abs(tr.actions).max(initial=0.0)) for tr in dataset.trajectories)
        dims["action_scale"] = peak or 1.0
    return cfg.replace(task=dataset.task, **dims), dataset


def has_env(task: str) -> bool:
    try:
        make_env(task)
    except ValueError:
        return False
    return True


def evaluate(policy, task: str, episodes: int, seed: int, occlusion: float = 0.0,
             execute: int = 1) -> RolloutResult:
    occ = OcclusionConfig(occlusion, seed) if occlusion > 0 else None
    return rollout_evaluate(policy, make_env(task), episodes, seed, occ, execute)


def _grad_or_zero(grads: dict, p) -> np.ndarray:
    g = grads.get(p)
    return np.zeros_like(p.data) if g is None else g


def _write_line(fh, record: dict) -> None:
    fh.write(json.dumps(record, sort_keys=True) + "\n")
    fh.flush()


def train(cfg: TrainConfig, dataset: DemoDataset | None = None, out_dir=None) -> TrainResult:
    """Train one policy; returns the final checkpoint and per-epoch metrics.

    With ``out_dir`` the metrics stream is appended to ``metrics.jsonl`` as it
    is produced and the final checkpoint is written to ``final.ckpt``.
    """
    cfg, dataset = resolve_dataset(cfg, dataset)
    init_ss, train_ss = np.random.SeedSequence(cfg.seed).spawn(2)
    net = build_network(cfg.network_config(), np.random.default_rng(init_ss))
    policy = make_policy(cfg, net)
    params = net.parameters()
    n_params = count_parameters(net).total
    rng = np.random.default_rng(train_ss)
    S, A, C = make_windows(dataset, cfg.K, cfg.J)
    M = len(S)
    occ = OcclusionConfig(cfg.occlusion, cfg.seed) if cfg.occlusion > 0 else None
    evaluable = cfg.eval_every > 0 and has_env(cfg.task)
    state = AdamState()
    total_steps = cfg.epochs * math.ceil(M / cfg.batch_size)

    fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        fh = open(out_dir / METRICS_FILE, "w", encoding="utf-8")
        _write_line(fh, {"record": "config", "config": cfg.to_dict(), "param_count": n_params})
    metrics = []
    try:
        for epoch in range(1, cfg.epochs + 1):
            start = time.perf_counter()
            order = rng.permutation(M)
            losses = []
            for b, lo in enumerate(range(0, M, cfg.batch_size)):
                idx = order[lo:lo + cfg.batch_size]
                s = S[idx]
                if occ is not None:
                    s = apply_occlusion(s, occ, rng)
                c = None if C is None else C[idx]
                with T.GradientTape() as tape:
                    loss = policy.loss(s, A[idx], rng, c)
                value = float(loss.data)
                if not math.isfinite(value):
                    raise TrainingDivergedError(epoch, b, value)
                grads = T.backward(tape, loss)
                optimizer_step(params, [_grad_or_zero(grads, p) for p in params], state,
                               cfg.learning_rate(state.step, total_steps))
                losses.append(value)
            record = {"record": "epoch", "epoch": epoch, "loss": float(np.mean(losses)),
                      "success_rate": None, "param_count": n_params}
            if evaluable and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
                record["success_rate"] = evaluate(policy, cfg.task, cfg.eval_episodes,
                                                  cfg.eval_seed, 0.0, cfg.execute).success_rate
            record["wall_clock_s"] = time.perf_counter() - start
            metrics.append(record)
            if fh is not None:
                _write_line(fh, record)
    finally:
        if fh is not None:
            fh.close()

    ckpt = Checkpoint(cfg, net.state_dict(), cfg.epochs, rng.bit_generator.state)
    if out_dir is not None:
        save_checkpoint(ckpt, out_dir / CHECKPOINT_FILE)
    return TrainResult(cfg, ckpt, metrics, policy)


def read_metrics(path) -> list[dict]:
    """Parse a metrics stream without touching any checkpoint."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [json.loads(line) for line in lines if line.strip()]
