"""Flat ``key = value`` training configuration."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, fields
from pathlib import Path

from ..architectures import VARIANTS, PolicyNetworkConfig
from ..policy import NOISE_RULES

POLICIES = ("BC", "DDP")
LR_SCHEDULES = ("constant", "cosine")


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    policy: str = "DDP"
    variant: str = "D-Ma"
    task: str = "multimodal-reach"
    dataset: str = ""
    K: int = 1
    J: int = 4
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-4
    lr_schedule: str = "constant"
    seed: int = 0
    diffusion_steps: int = 16
    beta_start: float = 1e-4
    beta_end: float = 0.1
    noise_rule: str = "standard"
    occlusion: float = 0.0
    action_scale: float = 0.0
    model_dim: int = 64
    depth: int = 6
    encoder_depth: int = 4
    decoder_depth: int = 4
    state_dim: int = 8
    conv_width: int = 4
    heads: int = 4
    ffn_dim: int = 128
    scan_mode: str = "sequential"
    obs_dim: int = 0
    act_dim: int = 0
    cond_dim: int = 0
    eval_every: int = 0
    eval_episodes: int = 50
    eval_seed: int = 1000
    execute: int = 1

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ConfigError(f"policy must be one of {POLICIES}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        if self.noise_rule not in NOISE_RULES:
            raise ConfigError(f"noise_rule must be one of {NOISE_RULES}")
        if not (0.0 <= self.occlusion <= 1.0):
            raise ConfigError("occlusion must lie in [0, 1]")
        for name in ("K", "J", "epochs", "batch_size", "diffusion_steps", "execute"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigError(f"lr_schedule must be one of {LR_SCHEDULES}")
        if self.action_scale < 0:
            raise ConfigError("action_scale must be non-negative (0 = infer from data)")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.execute > self.J:
            raise ConfigError("execute cannot exceed J")

    def learning_rate(self, step: int, total: int) -> float:
        """Rate for optimizer step ``step`` (0-based) out of ``total``."""
        if self.lr_schedule == "cosine":
            return self.lr * 0.5 * (1.0 + math.cos(math.pi * step / total))
        return self.lr

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)!s}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            try:
                values[key] = {"int": int, "float": float}.get(types[key], str)(value)
            except ValueError:
                raise ConfigError(f"line {lineno}: bad value for {key}: {value!r}") from None
        return cls(**values)

    def network_config(self) -> PolicyNetworkConfig:
        if self.obs_dim < 1 or self.act_dim < 1:
            raise ConfigError("obs_dim/act_dim unresolved; set them or train on a dataset")
        return PolicyNetworkConfig(
            variant=self.variant, obs_dim=self.obs_dim, act_dim=self.act_dim, K=self.K, J=self.J,
            model_dim=self.model_dim, depth=self.depth, encoder_depth=self.encoder_depth,
            decoder_depth=self.decoder_depth, state_dim=self.state_dim,
            conv_width=self.conv_width, heads=self.heads, ffn_dim=self.ffn_dim,
            cond_dim=self.cond_dim, diffusion_steps=self.diffusion_steps,
            scan_mode=self.scan_mode, seed=self.seed)


def load_config(path) -> TrainConfig:
    return TrainConfig.from_text(Path(path).read_text(encoding="utf-8"))
