"""Adam with bias correction, operating in place on parameter tensors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..tensor import ShapeError, Tensor


@dataclass
class AdamState:
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    step: int = 0


def optimizer_step(params, grads, state: AdamState, lr: float, beta1: float = 0.9,
                   beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """One Adam update. ``params`` are Tensors or arrays, updated in place."""
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    arrays = [p.data if isinstance(p, Tensor) else p for p in params]
    for i, (w, g) in enumerate(zip(arrays, grads)):
        if np.shape(g) != w.shape:
            raise ShapeError(f"gradient {i} has shape {np.shape(g)}, parameter has {w.shape}")
    if not state.m:
        state.m = [np.zeros_like(w) for w in arrays]
        state.v = [np.zeros_like(w) for w in arrays]
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for w, g, m, v in zip(arrays, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g)
        w -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


class Adam:
    def __init__(self, params: list[Tensor], lr: float = 1e-4):
        self.params = list(params)
        self.lr = lr
        self.state = AdamState()

    def step(self) -> None:
        grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        optimizer_step(self.params, grads, self.state, self.lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
