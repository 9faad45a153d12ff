"""Behavioral cloning and denoising-diffusion policies over any denoising network."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

NOISE_RULES = ("standard", "paper")

# BC runs the network with zero action tokens at a fixed step index.
BC_STEP = 1


@dataclass(frozen=True)
class NoiseSchedule:
    """Arrays are indexed by step t = 1..T at position t - 1."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    def check_step(self, t) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"diffusion step out of range 1..{self.T}")
        return t

    @classmethod
    def from_alphas(cls, alpha) -> "NoiseSchedule":
        alpha = np.asarray(alpha, dtype=np.float64)
        if np.any(alpha <= 0) or np.any(alpha >= 1):
            raise ValueError("alphas must lie in (0, 1)")
        return cls(1.0 - alpha, alpha, np.cumprod(alpha))


def make_noise_schedule(T: int = 16, beta_start: float = 1e-4, beta_end: float = 0.1) -> NoiseSchedule:
    """Linearly spaced betas; alpha = 1 - beta, alpha_bar = cumulative product."""
    if T < 1:
        raise ValueError("T must be at least 1")
    if not (0 < beta_start <= beta_end < 1):
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    beta = np.linspace(beta_start, beta_end, T) if T > 1 else np.array([beta_start])
    alpha = 1.0 - beta
    return NoiseSchedule(beta, alpha, np.cumprod(alpha))


@dataclass
class BcConfig:
    sigma2: float = 1.0

    def __post_init__(self):
        if self.sigma2 <= 0:
            raise ValueError("sigma2 must be positive")


@dataclass
class SamplerOptions:
    noise_rule: str = "standard"
    seed: int = 0

    def __post_init__(self):
        if self.noise_rule not in NOISE_RULES:
            raise ValueError(f"noise_rule must be one of {NOISE_RULES}")


def _per_item(coef: np.ndarray, ndim: int) -> np.ndarray:
    coef = np.asarray(coef, dtype=np.float64)
    return coef.reshape(coef.shape + (1,) * (ndim - coef.ndim))


def forward_noising(a0, t, z, sched: NoiseSchedule):
    """a^t = sqrt(alpha_bar_t) a0 + sqrt(1 - alpha_bar_t) z.

    ``t`` is a scalar or one step per leading batch item.
    """
    t = sched.check_step(t)
    ab = sched.alpha_bar[t - 1]
    a0_arr = T.as_tensor(a0).data
    c0 = _per_item(np.sqrt(ab), a0_arr.ndim)
    cz = _per_item(np.sqrt(1.0 - ab), a0_arr.ndim)
    if isinstance(a0, Tensor) or isinstance(z, Tensor):
        return T.as_tensor(a0) * c0 + T.as_tensor(z) * cz
    return c0 * np.asarray(a0, dtype=np.float64) + cz * np.asarray(z, dtype=np.float64)


def denoise_step(a_t: np.ndarray, t: int, eps_hat: np.ndarray, sched: NoiseSchedule,
                 z: np.ndarray | None = None, noise_rule: str = "standard") -> np.ndarray:
    """One reverse update a^t -> a^{t-1}.

    a^{t-1} = (a^t - (1 - alpha_t) / sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_t) + c_t z
    with c_t = sqrt(beta_t) ("standard") or sqrt(alpha_t) ("paper"); c_1 = 0.
    """
    alpha = sched.alpha[t - 1]
    ab = sched.alpha_bar[t - 1]
    mean = (a_t - (1.0 - alpha) / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(alpha)
    if t == 1 or z is None:
        return mean
    c = np.sqrt(sched.beta[t - 1]) if noise_rule == "standard" else np.sqrt(alpha)
    return mean + c * z


def _squared_error(pred: Tensor, target) -> Tensor:
    diff = pred - T.as_tensor(target)
    per_item = (diff * diff).reshape(diff.shape[0], -1).sum(axis=1)
    return per_item.mean()


def ddpm_training_loss(net, s_hist, a0, sched: NoiseSchedule, rng: np.random.Generator,
                       cond=None) -> Tensor:
    """Mean over the batch of ||eps_theta(a^t, t, s) - z||^2 with t ~ U{1..T}.

    ``net`` is any callable (s_hist, a_t, t, cond) -> noise prediction.
    """
    a0 = np.asarray(T.as_tensor(a0).data)
    if a0.shape[0] == 0:
        raise ValueError("empty batch")
    B = a0.shape[0]
    t = rng.integers(1, sched.T + 1, size=B)
    z = rng.standard_normal(a0.shape)
    a_t = forward_noising(a0, t, z, sched)
    return _squared_error(net(s_hist, a_t, t, cond), z)


def ddpm_sample(net, s_hist, sched: NoiseSchedule, opts: SamplerOptions | None = None,
                rng: np.random.Generator | None = None, cond=None,
                action_shape: tuple[int, int] | None = None) -> np.ndarray:
    """Run the reverse chain from a^T ~ N(0, I) down to a^0.

    ``s_hist`` is (K, obs_dim) or batched (B, K, obs_dim). ``rng`` overrides
    the seed in ``opts``.
    """
    opts = opts or SamplerOptions()
    if rng is None:
        rng = np.random.default_rng(opts.seed)
    s = np.asarray(T.as_tensor(s_hist).data)
    if action_shape is None:
        action_shape = (net.cfg.J, net.cfg.act_dim)
    batched = s.ndim == 3
    shape = ((s.shape[0],) if batched else ()) + tuple(action_shape)
    a = rng.standard_normal(shape)
    for t in range(sched.T, 0, -1):
        eps = np.asarray(T.as_tensor(net(s, a, t, cond)).data)
        z = rng.standard_normal(shape) if t > 1 else None
        a = denoise_step(a, t, eps, sched, z, opts.noise_rule)
    return a


def _zero_actions(net, s: Tensor) -> np.ndarray:
    lead = s.shape[:-2]
    return np.zeros(lead + (net.cfg.J, net.cfg.act_dim))


def bc_mean(net, s_hist, cond=None) -> Tensor:
    """mu_theta(s): the network evaluated with zero action tokens at step BC_STEP."""
    s = T.as_tensor(s_hist)
    return net(s, _zero_actions(net, s), BC_STEP, cond)


def bc_loss(net_mean, s_hist, a, cond=None) -> Tensor:
    """Mean over the batch of ||mu_theta(s) - a||^2 over the flattened action chunk.

    ``net_mean`` maps (s_hist, cond) to the predicted action chunk.
    """
    a = np.asarray(T.as_tensor(a).data)
    if a.shape[0] == 0:
        raise ValueError("empty batch")
    return _squared_error(net_mean(s_hist, cond), a)


def bc_predict(net_mean, s_hist, cond=None) -> np.ndarray:
    return np.asarray(T.as_tensor(net_mean(s_hist, cond)).data)


def _check_scale(scale: float) -> float:
    if not scale > 0:
        raise ValueError("action_scale must be positive")
    return float(scale)


class DiffusionPolicy:
    """Rollout-facing wrapper: observation history -> sampled action chunk."""

    kind = "DDP"

    def __init__(self, net, sched: NoiseSchedule, opts: SamplerOptions | None = None,
                 action_scale: float = 1.0):
        self.net = net
        self.sched = sched
        self.opts = opts or SamplerOptions()
        # the network works on actions divided by this factor
        self.action_scale = _check_scale(action_scale)

    @property
    def K(self) -> int:
        return self.net.cfg.K

    @property
    def J(self) -> int:
        return self.net.cfg.J

    @property
    def obs_dim(self) -> int:
        return self.net.cfg.obs_dim

    @property
    def act_dim(self) -> int:
        return self.net.cfg.act_dim

    def loss(self, s_hist, a0, rng, cond=None) -> Tensor:
        a0 = np.asarray(T.as_tensor(a0).data) / self.action_scale
        return ddpm_training_loss(self.net, s_hist, a0, self.sched, rng, cond)

    def predict(self, s_hist, rng: np.random.Generator, cond=None) -> np.ndarray:
        a = ddpm_sample(self.net, s_hist, self.sched, self.opts, rng=rng, cond=cond)
        return a * self.action_scale


class BCPolicy:
    kind = "BC"

    def __init__(self, net, cfg: BcConfig | None = None, action_scale: float = 1.0):
        self.net = net
        self.cfg = cfg or BcConfig()
        self.action_scale = _check_scale(action_scale)

    K = DiffusionPolicy.K
    J = DiffusionPolicy.J
    obs_dim = DiffusionPolicy.obs_dim
    act_dim = DiffusionPolicy.act_dim

    def mean(self, s_hist, cond=None) -> Tensor:
        return bc_mean(self.net, s_hist, cond)

    def loss(self, s_hist, a, rng=None, cond=None) -> Tensor:
        a = np.asarray(T.as_tensor(a).data) / self.action_scale
        return bc_loss(self.mean, s_hist, a, cond)

    def predict(self, s_hist, rng=None, cond=None) -> np.ndarray:
        return bc_predict(self.mean, s_hist, cond) * self.action_scale
