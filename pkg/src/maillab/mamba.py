"""Mamba block and pre-norm residual stacks.

Per-block parameter count, with inner width D = E * D_m::

    in projections   2 * (D_m * D + D)
    depthwise conv   W * D + D
    selective SSM    3 * D * N + 2 * D      (A_log, W_B, W_C, W_delta, b_delta)
    out projection   D * D_m + D_m
    -----------------------------------------
    total            3 * D_m * D + D * (W + 3 * N + 5) + D_m

A stack adds 2 * D_m LayerNorm parameters per block plus 2 * D_m for the
final norm.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, Module, parameter, uniform_fan_in
from .ssm import SelectiveSsmParams, selective_ssm_forward


@dataclass(frozen=True)
class MambaBlockConfig:
    model_dim: int
    state_dim: int = 8
    conv_width: int = 4
    expand_factor: int = 2

    def __post_init__(self):
        if self.expand_factor != 2:
            raise ValueError("expand factor is fixed at 2")
        if self.conv_width < 1 or self.state_dim < 1 or self.model_dim < 1:
            raise ValueError("model_dim, state_dim and conv_width must be positive")

    @property
    def inner_dim(self) -> int:
        return self.expand_factor * self.model_dim


def block_parameter_count(cfg: MambaBlockConfig) -> int:
    dm, d, n, w = cfg.model_dim, cfg.inner_dim, cfg.state_dim, cfg.conv_width
    return 3 * dm * d + d * (w + 3 * n + 5) + dm


class MambaBlock(Module):
    def __init__(self, cfg: MambaBlockConfig, rng: np.random.Generator,
                 zero_out: bool = True, scan_mode: str = "sequential"):
        d = cfg.inner_dim
        self.cfg = cfg
        self.scan_mode = scan_mode
        self.in_proj_u = Linear(cfg.model_dim, d, rng)
        self.in_proj_g = Linear(cfg.model_dim, d, rng)
        self.conv_kernel = uniform_fan_in(rng, cfg.conv_width, (cfg.conv_width, d))
        self.conv_bias = parameter(np.zeros(d))
        self.ssm = SelectiveSsmParams(d, cfg.state_dim, rng)
        self.out_proj = Linear(d, cfg.model_dim, rng, zero_init=zero_out)

    def forward(self, x):
        u = self.in_proj_u(x)
        g = self.in_proj_g(x)
        u = T.silu(T.causal_depthwise_conv(u, self.conv_kernel, self.conv_bias))
        y = selective_ssm_forward(u, self.ssm, self.scan_mode)
        return self.out_proj(y * T.silu(g))


def mamba_block_forward(x, block: MambaBlock):
    return block(x)


class MambaStack(Module):
    """x <- x + block(LN(x)) for each block, then a final LayerNorm."""

    def __init__(self, cfg: MambaBlockConfig, depth: int, rng: np.random.Generator,
                 zero_out: bool = True, scan_mode: str = "sequential"):
        self.cfg = cfg
        self.norms = [LayerNorm(cfg.model_dim) for _ in range(depth)]
        self.blocks = [MambaBlock(cfg, rng, zero_out, scan_mode) for _ in range(depth)]
        self.final_norm = LayerNorm(cfg.model_dim)

    @property
    def depth(self) -> int:
        return len(self.blocks)

    def forward(self, x, start: int = 0, stop: int | None = None, final_norm: bool = True):
        """Run blocks ``start:stop``; the final norm is optional so a stack can be split."""
        for norm, block in list(zip(self.norms, self.blocks))[start:stop]:
            x = x + block(norm(x))
        return self.final_norm(x) if final_norm else x


def mamba_stack_forward(x, stack: MambaStack):
    return stack(x)
