"""Selective state-space layer.

Shapes follow a per-channel diagonal state: for inner width D and state size
N, ``A`` is (D, N), ``B``/``C`` are projected per token to (..., L, N), and
the step size is (..., L, D). Discretized tensors are (..., L, D, N).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Module, parameter, uniform_fan_in
from .tensor import Tensor, custom_op

__all__ = [
    "StabilityError",
    "ContractError",
    "SelectiveSsmParams",
    "DiscretizedParams",
    "selective_projections",
    "discretize_zoh",
    "scan_sequential",
    "scan_parallel",
    "blelloch_scan",
    "convolution_kernel",
    "ssm_convolution_mode",
    "selective_ssm_forward",
]


class StabilityError(ValueError):
    """State matrix has a nonnegative entry."""


class ContractError(ValueError):
    """Operation called with parameters outside its contract."""


def inverse_softplus(y: np.ndarray) -> np.ndarray:
    return y + np.log(-np.expm1(-y))


class SelectiveSsmParams(Module):
    """Learnable parameters of one selective SSM.

    ``A_log`` stores log(-A), so A = -exp(A_log) is strictly negative by
    construction. ``W_delta`` is (D, 1): the step size gets one shared
    input-dependent term broadcast across channels plus a per-channel bias.
    """

    def __init__(self, d_inner: int, state_dim: int, rng: np.random.Generator,
                 dt_min: float = 1e-3, dt_max: float = 1e-1):
        self.d_inner = d_inner
        self.state_dim = state_dim
        self.A_log = parameter(np.log(np.tile(np.arange(1, state_dim + 1, dtype=float),
                                              (d_inner, 1))))
        self.W_B = uniform_fan_in(rng, d_inner, (d_inner, state_dim))
        self.W_C = uniform_fan_in(rng, d_inner, (d_inner, state_dim))
        self.W_delta = uniform_fan_in(rng, d_inner, (d_inner, 1))
        dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), size=d_inner))
        self.b_delta = parameter(inverse_softplus(dt))

    def A(self) -> Tensor:
        return -T.exp(self.A_log)


@dataclass
class DiscretizedParams:
    A_bar: Tensor
    B_bar: Tensor


def selective_projections(x, p: SelectiveSsmParams) -> tuple[Tensor, Tensor, Tensor]:
    """Per-token B, C (no bias) and step size Delta = softplus(x W_delta + b_delta)."""
    x = T.as_tensor(x)
    if x.shape[-1] != p.d_inner:
        raise T.ShapeError(f"selective ssm expects {p.d_inner} channels, got {x.shape[-1]}")
    B = T.linear(x, p.W_B)
    C = T.linear(x, p.W_C)
    delta = T.softplus(T.linear(x, p.W_delta) + p.b_delta)
    return B, C, delta


def discretize_zoh(A, B, delta) -> DiscretizedParams:
    """Zero-order hold for diagonal A.

    A_bar = exp(delta*A); B_bar = (exp(delta*A) - 1) / A * B. The expm1 form
    keeps B_bar -> delta * B accurate as delta -> 0, and A < 0 strictly so
    the division is always defined.
    """
    A, B, delta = T.as_tensor(A), T.as_tensor(B), T.as_tensor(delta)
    if np.any(A.data >= 0):
        raise StabilityError("state matrix A must be strictly negative")
    if np.any(delta.data <= 0):
        raise StabilityError("step size must be strictly positive")
    Ad, Bd, dd = A.data, B.data, delta.data
    dl = dd[..., :, None]                          # (..., L, D, 1)
    Bx = Bd[..., :, None, :]                       # (..., L, 1, N)
    em1 = np.multiply(dl, Ad)                      # (..., L, D, N)
    np.expm1(em1, out=em1)
    A_bar = em1 + 1.0
    inv_A = 1.0 / Ad
    B_bar = em1 * inv_A
    B_bar *= Bx

    def bw(gA, gB):
        gBB = gB * Bx
        g_delta = (A_bar * (gA * Ad + gBB)).sum(axis=-1)
        # d B_bar / dA = (delta * A_bar * A - expm1) / A^2 * B
        dA = gA * A_bar * dl + gBB * (dl * A_bar - em1 * inv_A) * inv_A
        g_A = dA.reshape(-1, *Ad.shape).sum(axis=0)
        g_B = (gB * em1 * inv_A).sum(axis=-2)
        return g_A, g_B, g_delta

    a_bar, b_bar = custom_op((A_bar, B_bar), (A, B, delta), bw)
    return DiscretizedParams(a_bar, b_bar)


def _check_scan_shapes(dp: DiscretizedParams, C: Tensor, x: Tensor) -> None:
    a = dp.A_bar.shape
    if dp.B_bar.shape != a:
        raise T.ShapeError("A_bar and B_bar shapes differ")
    if x.shape != a[:-1]:
        raise T.ShapeError(f"x shape {x.shape} inconsistent with discretized {a}")
    if C.shape != a[:-2] + (a[-1],):
        raise T.ShapeError(f"C shape {C.shape} inconsistent with discretized {a}")


def scan_sequential(dp: DiscretizedParams, C, x) -> Tensor:
    """Left-to-right recurrence h_t = A_bar_t h_{t-1} + B_bar_t x_t, y_t = C_t . h_t."""
    C, x = T.as_tensor(C), T.as_tensor(x)
    _check_scan_shapes(dp, C, x)
    Ab, Bb, Cd, xd = dp.A_bar.data, dp.B_bar.data, C.data, x.data
    L = xd.shape[-2]
    u = Bb * xd[..., None]
    h = np.empty_like(Ab)
    prev = np.zeros(Ab.shape[:-3] + Ab.shape[-2:])
    for t in range(L):
        prev = Ab[..., t, :, :] * prev + u[..., t, :, :]
        h[..., t, :, :] = prev
    y = np.einsum("...ldn,...ln->...ld", h, Cd)

    def bw(g):
        gC = np.einsum("...ld,...ldn->...ln", g, h)
        gh_direct = g[..., None] * Cd[..., :, None, :]
        dh = np.empty_like(h)
        carry = np.zeros_like(prev)
        for t in range(L - 1, -1, -1):
            carry = gh_direct[..., t, :, :] + carry
            dh[..., t, :, :] = carry
            carry = carry * Ab[..., t, :, :]
        return _scan_input_grads(dh, h, Ab, Bb, xd, u) + (gC,)

    return _scan_op(y, dp, C, x, bw)


def _scan_input_grads(dh, h, Ab, Bb, xd, u):
    h_prev = np.zeros_like(h)
    h_prev[..., 1:, :, :] = h[..., :-1, :, :]
    gA = dh * h_prev
    gB = dh * xd[..., None]
    gx = (dh * Bb).sum(axis=-1)
    return gA, gB, gx


def _scan_op(y, dp, C, x, bw) -> Tensor:
    def reorder(g):
        gA, gB, gx, gC = bw(g)
        return gA, gB, gC, gx

    return custom_op(y, (dp.A_bar, dp.B_bar, C, x), reorder)


def blelloch_scan(a: np.ndarray, b: np.ndarray, axis: int = 0) -> np.ndarray:
    """Inclusive scan of h_t = a_t h_{t-1} + b_t (h_{-1} = 0) along ``axis``.

    Work-efficient up-sweep/down-sweep over the associative combine
    (a2, b2) o (a1, b1) = (a2 a1, a2 b1 + b2); sequences whose length is not
    a power of two are padded with the identity element (1, 0).
    """
    a = np.moveaxis(np.asarray(a, dtype=np.float64), axis, 0)
    b = np.moveaxis(np.asarray(b, dtype=np.float64), axis, 0)
    L = a.shape[0]
    P = 1 << max(0, (L - 1).bit_length())
    ta = np.ones((P,) + a.shape[1:])
    tb = np.zeros((P,) + b.shape[1:])
    ta[:L] = a
    tb[:L] = b

    stride = 1
    while stride < P:                      # up-sweep: subtree totals
        right = np.arange(2 * stride - 1, P, 2 * stride)
        left = right - stride
        tb[right] = ta[right] * tb[left] + tb[right]
        ta[right] = ta[right] * ta[left]
        stride *= 2

    ta[P - 1] = 1.0                        # down-sweep: exclusive prefixes
    tb[P - 1] = 0.0
    stride = P // 2
    while stride >= 1:
        right = np.arange(2 * stride - 1, P, 2 * stride)
        left = right - stride
        la, lb = ta[left].copy(), tb[left].copy()
        ta[left], tb[left] = ta[right], tb[right]
        tb[right] = la * tb[right] + lb
        ta[right] = la * ta[right]
        stride //= 2

    h = a * tb[:L] + b                     # fold in each element: inclusive result
    return np.moveaxis(h, 0, axis)


def scan_parallel(dp: DiscretizedParams, C, x) -> Tensor:
    """Same recurrence as :func:`scan_sequential`, via a Blelloch scan over L.

    The backward pass is itself a linear recurrence run right-to-left, so it
    reuses the same scan on reversed sequences.
    """
    C, x = T.as_tensor(C), T.as_tensor(x)
    _check_scan_shapes(dp, C, x)
    Ab, Bb, Cd, xd = dp.A_bar.data, dp.B_bar.data, C.data, x.data
    if xd.shape[-2] == 1:
        return scan_sequential(dp, C, x)
    axis = Ab.ndim - 3
    u = Bb * xd[..., None]
    h = blelloch_scan(Ab, u, axis=axis)
    y = np.einsum("...ldn,...ln->...ld", h, Cd)

    def bw(g):
        gC = np.einsum("...ld,...ldn->...ln", g, h)
        gh_direct = g[..., None] * Cd[..., :, None, :]
        # dh_t = gh_t + A_bar_{t+1} dh_{t+1}: reversed, coefficient shifted by one
        a_next = np.ones_like(Ab)
        a_next[..., :-1, :, :] = Ab[..., 1:, :, :]
        rev = lambda arr: np.flip(arr, axis=axis)
        dh = rev(blelloch_scan(rev(a_next), rev(gh_direct), axis=axis))
        return _scan_input_grads(dh, h, Ab, Bb, xd, u) + (gC,)

    return _scan_op(y, dp, C, x, bw)


def convolution_kernel(A_bar, B_bar, C, length: int) -> np.ndarray:
    """K[k, d] = sum_n C[n] A_bar[d, n]^k B_bar[d, n] for k < length."""
    Ab, Bb, Cd = (np.asarray(T.as_tensor(v).data) for v in (A_bar, B_bar, C))
    powers = Ab[None, :, :] ** np.arange(length)[:, None, None]
    return np.einsum("n,kdn->kd", Cd, powers * Bb[None])


def ssm_convolution_mode(A_bar, B_bar, C, x) -> Tensor:
    """Causal global convolution y_t = sum_{k<=t} K_k * x_{t-k} (time-invariant only).

    Inference path: the result is not recorded on a tape.
    """
    A_bar, B_bar, C, x = (T.as_tensor(v) for v in (A_bar, B_bar, C, x))
    if A_bar.ndim != 2 or B_bar.ndim != 2 or C.ndim != 1:
        raise ContractError(
            "convolution mode needs time-invariant parameters: A_bar, B_bar (D, N) and C (N,)")
    L, D = x.shape[-2:]
    if A_bar.shape != B_bar.shape or A_bar.shape[0] != D or C.shape[0] != A_bar.shape[1]:
        raise T.ShapeError("inconsistent time-invariant SSM shapes")
    K = convolution_kernel(A_bar, B_bar, C, L)
    xd = x.data
    y = np.zeros(xd.shape)
    for t in range(L):
        # y_t = sum_k K_k x_{t-k}
        y[..., t, :] = (K[: t + 1][::-1] * xd[..., : t + 1, :]).sum(axis=-2)
    return Tensor(y)


def _fused_inference_scan(A, B, C, delta, x) -> np.ndarray:
    """Gradient-free path: discretize one step at a time so the full
    (..., L, D, N) tensors are never materialized."""
    if np.any(A >= 0):
        raise StabilityError("state matrix A must be strictly negative")
    if np.any(delta <= 0):
        raise StabilityError("step size must be strictly positive")
    # state laid out (..., N, D) so the innermost loops run over channels
    A_t = np.ascontiguousarray(A.T)
    inv_A = 1.0 / A_t
    L = x.shape[-2]
    y = np.empty(x.shape)
    h = np.zeros(x.shape[:-2] + A_t.shape)
    em1 = np.empty_like(h)
    tmp = np.empty_like(h)
    for t in range(L):
        np.multiply(delta[..., t, None, :], A_t, out=em1)
        np.expm1(em1, out=em1)
        np.add(em1, 1.0, out=tmp)
        h *= tmp
        np.multiply(em1, inv_A, out=tmp)
        tmp *= B[..., t, :, None]
        tmp *= x[..., t, None, :]
        h += tmp
        y[..., t, :] = np.einsum("...nd,...n->...d", h, C[..., t, :])
    return y


def selective_ssm_forward(x, p: SelectiveSsmParams, mode: str = "sequential") -> Tensor:
    """Projections, ZOH discretization and a scan, differentiable end to end."""
    if mode == "convolution":
        raise ContractError("convolution mode is only valid for time-invariant parameters")
    if mode not in ("sequential", "parallel"):
        raise ValueError(f"unknown scan mode {mode!r}")
    x = T.as_tensor(x)
    B, C, delta = selective_projections(x, p)
    if not T.is_recording():
        return Tensor(_fused_inference_scan(p.A().data, B.data, C.data, delta.data, x.data))
    dp = discretize_zoh(p.A(), B, delta)
    scan = scan_sequential if mode == "sequential" else scan_parallel
    return scan(dp, C, x)
