"""Denoising networks over (observation history, noisy action chunk, diffusion step).

Every variant maps ``s_hist`` (B, K, obs_dim), ``a_noisy`` (B, J, act_dim) and
an integer step ``t`` to a (B, J, act_dim) output, so the policy code never
needs to know which backbone it is driving. Unbatched inputs (K, obs_dim) /
(J, act_dim) are accepted and return (J, act_dim).

Token layout for the decoder-only stream::

    [ TE(t) | obs_{k-K+1} ... obs_k | act_k ... act_{k+J-1} ]

Observation i sits at environment step k-K+1+i and action j at step k+j, so
both use the positional index of their environment step: obs i -> i and
action j -> K-1+j. The current observation and the first action share index
K-1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .mamba import MambaBlockConfig, MambaStack
from .nn import LayerNorm, Linear, Module, parameter
from .tensor import Tensor

VARIANTS = ("D-Ma", "ED-Ma", "D-Tr", "ED-Tr")


class AlignmentError(ValueError):
    """Encoder and decoder streams of an encoder-decoder model differ in length."""


@dataclass
class PolicyNetworkConfig:
    variant: str
    obs_dim: int
    act_dim: int
    K: int = 1
    J: int = 4
    model_dim: int = 64
    depth: int = 6
    encoder_depth: int = 4
    decoder_depth: int = 4
    state_dim: int = 8
    conv_width: int = 4
    heads: int = 4
    ffn_dim: int = 128
    cond_dim: int = 0
    diffusion_steps: int = 16
    scan_mode: str = "sequential"
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.K < 1 or self.J < 1:
            raise ValueError("K and J must be at least 1")
        if self.variant.startswith("ED") and (self.encoder_depth < 1 or self.decoder_depth < 1):
            raise ValueError("encoder-decoder variants need encoder_depth and decoder_depth > 0")
        if self.variant.endswith("Tr") and self.model_dim % self.heads:
            raise ValueError("model_dim must be divisible by the head count")

    @property
    def sequence_length(self) -> int:
        return 1 + self.K + self.J

    def block_config(self) -> MambaBlockConfig:
        return MambaBlockConfig(self.model_dim, self.state_dim, self.conv_width)


# ------------------------------------------------------------------ encodings

def sinusoidal(positions, dim: int) -> np.ndarray:
    pos = np.asarray(positions, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half, 1))
    ang = pos[..., None] * freqs
    out = np.zeros(pos.shape + (dim,))
    out[..., 0:2 * half:2] = np.sin(ang)
    out[..., 1:2 * half:2] = np.cos(ang)
    if dim % 2:
        out[..., -1] = np.sin(pos)
    return out


class TimeEmbedding(Module):
    """Sinusoidal embedding of the diffusion step followed by a learned projection."""

    def __init__(self, dim: int, max_steps: int, rng: np.random.Generator):
        self.dim = dim
        self.max_steps = max_steps
        self.proj = Linear(dim, dim, rng)

    def forward(self, t) -> Tensor:
        t = np.atleast_1d(np.asarray(t))
        if t.dtype.kind not in "iu" and not np.all(t == np.round(t)):
            raise ValueError("diffusion step must be an integer")
        if np.any(t < 1) or np.any(t > self.max_steps):
            raise ValueError(f"diffusion step out of range 1..{self.max_steps}: {t}")
        emb = self.proj(Tensor(sinusoidal(t, self.dim)))
        return emb.reshape(len(t), 1, self.dim)


def apply_positional_encoding(tokens, position_indices) -> Tensor:
    tokens = T.as_tensor(tokens)
    idx = list(position_indices)
    if len(idx) != tokens.shape[-2]:
        raise T.ShapeError(f"{len(idx)} position indices for {tokens.shape[-2]} tokens")
    return tokens + Tensor(sinusoidal(idx, tokens.shape[-1]))


def observation_positions(K: int) -> list[int]:
    return list(range(K))


def action_positions(K: int, J: int) -> list[int]:
    return list(range(K - 1, K - 1 + J))


class ObservationEncoder(Module):
    """Two-layer MLP shared across history positions.

    An optional fixed conditioning vector (e.g. a precomputed language
    embedding) is appended to every observation before encoding.
    """

    def __init__(self, obs_dim: int, dim: int, rng: np.random.Generator, cond_dim: int = 0):
        self.cond_dim = cond_dim
        self.fc1 = Linear(obs_dim + cond_dim, dim, rng)
        self.fc2 = Linear(dim, dim, rng)

    def forward(self, obs, cond=None) -> Tensor:
        obs = T.as_tensor(obs)
        if self.cond_dim:
            if cond is None:
                raise ValueError("this encoder expects a conditioning vector")
            c = np.asarray(T.as_tensor(cond).data)
            c = np.broadcast_to(c[..., None, :], obs.shape[:-1] + (self.cond_dim,))
            obs = T.concat([obs, Tensor(c)], axis=-1)
        return self.fc2(T.silu(self.fc1(obs)))


class AlignmentTokens(Module):
    """Learnable padding that lines the encoder and decoder streams up."""

    def __init__(self, K: int, J: int, dim: int, rng: np.random.Generator):
        scale = 0.02
        self.a_hat = parameter(rng.normal(0.0, scale, (J, dim)))
        self.s_hat = parameter(rng.normal(0.0, scale, (K, dim)))
        self.t_hat = parameter(rng.normal(0.0, scale, (1, dim)))


def _broadcast_batch(p: Tensor, batch: int) -> Tensor:
    return p + Tensor(np.zeros((batch,) + p.shape))


# ----------------------------------------------------------------- attention

class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator, zero_out: bool = True):
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.o = Linear(dim, dim, rng, zero_init=zero_out)
        self.last_weights: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        B, L, D = x.shape
        return x.reshape(B, L, self.heads, D // self.heads).transpose(0, 2, 1, 3)

    def forward(self, x, memory=None, causal: bool = False) -> Tensor:
        src = x if memory is None else memory
        q, k, v = self._split(self.q(x)), self._split(self.k(src)), self._split(self.v(src))
        dh = q.shape[-1]
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh))
        mask = None
        if causal:
            Lq, Lk = scores.shape[-2:]
            mask = np.tril(np.ones((Lq, Lk), dtype=bool), k=Lk - Lq)
        w = T.softmax(scores, axis=-1, mask=mask)
        self.last_weights = w.data
        out = (w @ v).transpose(0, 2, 1, 3)
        B, L = out.shape[:2]
        return self.o(out.reshape(B, L, -1))


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, zero_out: bool = True):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng, zero_init=zero_out)

    def forward(self, x):
        return self.fc2(T.gelu(self.fc1(x)))


class TransformerBlock(Module):
    """Pre-norm block: self-attention, optional cross-attention, feed-forward."""

    def __init__(self, dim: int, heads: int, ffn_dim: int, rng: np.random.Generator,
                 causal: bool, cross: bool = False, zero_out: bool = True):
        self.causal = causal
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng, zero_out)
        if cross:
            self.norm_cross = LayerNorm(dim)
            self.cross_attn = MultiHeadAttention(dim, heads, rng, zero_out)
        self.norm2 = LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_dim, rng, zero_out)

    def forward(self, x, memory=None):
        x = x + self.attn(self.norm1(x), causal=self.causal)
        if memory is not None:
            x = x + self.cross_attn(self.norm_cross(x), memory=memory)
        return x + self.ffn(self.norm2(x))


# ------------------------------------------------------------------ networks

class DenoisingNetwork(Module):
    """Shared front end: encoders, time embedding and the output head."""

    def __init__(self, cfg: PolicyNetworkConfig, rng: np.random.Generator):
        self.cfg = cfg
        dm = cfg.model_dim
        self.obs_encoder = ObservationEncoder(cfg.obs_dim, dm, rng, cfg.cond_dim)
        self.act_encoder = Linear(cfg.act_dim, dm, rng)
        self.time_embedding = TimeEmbedding(dm, cfg.diffusion_steps, rng)

    def _prepare(self, s_hist, a_noisy, t):
        s = T.as_tensor(s_hist)
        a = T.as_tensor(a_noisy)
        batched = s.ndim == 3
        if not batched:
            s = s.reshape(1, *s.shape)
            a = a.reshape(1, *a.shape)
        cfg = self.cfg
        if s.shape[1:] != (cfg.K, cfg.obs_dim):
            raise T.ShapeError(f"s_hist must be (K={cfg.K}, obs_dim={cfg.obs_dim}), got {s.shape[1:]}")
        if a.shape[1:] != (cfg.J, cfg.act_dim):
            raise T.ShapeError(f"a_noisy must be (J={cfg.J}, act_dim={cfg.act_dim}), got {a.shape[1:]}")
        if a.shape[0] != s.shape[0]:
            raise T.ShapeError("batch sizes of s_hist and a_noisy differ")
        B = s.shape[0]
        t = np.asarray(t)
        if t.ndim == 0:
            t = np.full(B, int(t))
        if t.shape != (B,):
            raise T.ShapeError(f"t must be a scalar or have shape ({B},)")
        return s, a, t, batched

    def _embed(self, s, a, t, cond):
        cfg = self.cfg
        e_t = self.time_embedding(t)
        e_s = apply_positional_encoding(self.obs_encoder(s, cond), observation_positions(cfg.K))
        e_a = apply_positional_encoding(self.act_encoder(a), action_positions(cfg.K, cfg.J))
        return e_t, e_s, e_a

    def features(self, s_hist, a_noisy, t, cond=None) -> Tensor:
        """Pre-head representations of the J action slots, (B, J, model_dim)."""
        s, a, t, _ = self._prepare(s_hist, a_noisy, t)
        return self._features(s, a, t, cond)

    def forward(self, s_hist, a_noisy, t, cond=None) -> Tensor:
        s, a, t, batched = self._prepare(s_hist, a_noisy, t)
        out = self.head(self._features(s, a, t, cond))
        return out if batched else out.reshape(self.cfg.J, self.cfg.act_dim)


class DMa(DenoisingNetwork):
    """Decoder-only Mamba: one stack over [TE; obs; act], head on the last J tokens."""

    def __init__(self, cfg: PolicyNetworkConfig, rng: np.random.Generator):
        super().__init__(cfg, rng)
        self.decoder = MambaStack(cfg.block_config(), cfg.depth, rng, scan_mode=cfg.scan_mode)
        self.head = Linear(cfg.model_dim, cfg.act_dim, rng)

    def _features(self, s, a, t, cond):
        seq = T.concat(self._embed(s, a, t, cond), axis=1)
        return self.decoder(seq)[:, -self.cfg.J:, :]


class EDMa(DenoisingNetwork):
    """Encoder-decoder Mamba with learnable alignment tokens.

    encoder:  [TE(t); PE(obs); a_hat]           -> E
    decoder:  first layer on [t_hat; s_hat; PE(act)] -> D
              remaining layers on E + D (summed once)
    """

    def __init__(self, cfg: PolicyNetworkConfig, rng: np.random.Generator):
        super().__init__(cfg, rng)
        bc = cfg.block_config()
        self.encoder = MambaStack(bc, cfg.encoder_depth, rng, scan_mode=cfg.scan_mode)
        self.decoder = MambaStack(bc, cfg.decoder_depth, rng, scan_mode=cfg.scan_mode)
        self.align = AlignmentTokens(cfg.K, cfg.J, cfg.model_dim, rng)
        self.head = Linear(cfg.model_dim, cfg.act_dim, rng)

    def _features(self, s, a, t, cond):
        B = s.shape[0]
        e_t, e_s, e_a = self._embed(s, a, t, cond)
        enc_in = T.concat([e_t, e_s, _broadcast_batch(self.align.a_hat, B)], axis=1)
        dec_in = T.concat([_broadcast_batch(self.align.t_hat, B),
                           _broadcast_batch(self.align.s_hat, B), e_a], axis=1)
        if enc_in.shape[1] != dec_in.shape[1]:
            raise AlignmentError(
                f"encoder stream has {enc_in.shape[1]} tokens, decoder stream {dec_in.shape[1]}")
        enc = self.encoder(enc_in)
        dec = self.decoder(dec_in, 0, 1, final_norm=False)
        out = self.decoder(enc + dec, 1, None, final_norm=True)
        return out[:, -self.cfg.J:, :]


class DTr(DenoisingNetwork):
    """Decoder-only transformer: causal self-attention over [TE; obs; act]."""

    def __init__(self, cfg: PolicyNetworkConfig, rng: np.random.Generator):
        super().__init__(cfg, rng)
        self.blocks = [TransformerBlock(cfg.model_dim, cfg.heads, cfg.ffn_dim, rng, causal=True)
                       for _ in range(cfg.depth)]
        self.final_norm = LayerNorm(cfg.model_dim)
        self.head = Linear(cfg.model_dim, cfg.act_dim, rng)

    def _features(self, s, a, t, cond):
        x = T.concat(self._embed(s, a, t, cond), axis=1)
        for blk in self.blocks:
            x = blk(x)
        return self.final_norm(x)[:, -self.cfg.J:, :]


class EDTr(DenoisingNetwork):
    """Encoder over [TE; obs]; decoder on action tokens with causal self- and cross-attention."""

    def __init__(self, cfg: PolicyNetworkConfig, rng: np.random.Generator):
        super().__init__(cfg, rng)
        dm = cfg.model_dim
        self.encoder_blocks = [TransformerBlock(dm, cfg.heads, cfg.ffn_dim, rng, causal=False)
                               for _ in range(cfg.encoder_depth)]
        self.encoder_norm = LayerNorm(dm)
        self.decoder_blocks = [TransformerBlock(dm, cfg.heads, cfg.ffn_dim, rng, causal=True,
                                                cross=True)
                               for _ in range(cfg.decoder_depth)]
        self.decoder_norm = LayerNorm(dm)
        self.head = Linear(dm, cfg.act_dim, rng)

    def _features(self, s, a, t, cond):
        e_t, e_s, e_a = self._embed(s, a, t, cond)
        mem = T.concat([e_t, e_s], axis=1)
        for blk in self.encoder_blocks:
            mem = blk(mem)
        mem = self.encoder_norm(mem)
        x = e_a
        for blk in self.decoder_blocks:
            x = blk(x, memory=mem)
        return self.decoder_norm(x)


_CLASSES = {"D-Ma": DMa, "ED-Ma": EDMa, "D-Tr": DTr, "ED-Tr": EDTr}


def build_network(cfg: PolicyNetworkConfig, rng: np.random.Generator | None = None) -> DenoisingNetwork:
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    return _CLASSES[cfg.variant](cfg, rng)


def d_ma_forward(net: DMa, s_hist, a_noisy, t, cond=None) -> Tensor:
    return net(s_hist, a_noisy, t, cond)


def ed_ma_forward(net: EDMa, s_hist, a_noisy, t, cond=None) -> Tensor:
    return net(s_hist, a_noisy, t, cond)


def attention_baseline_forward(net: DenoisingNetwork, s_hist, a_noisy, t, cond=None) -> Tensor:
    if not isinstance(net, (DTr, EDTr)):
        raise TypeError("attention_baseline_forward expects a D-Tr or ED-Tr network")
    return net(s_hist, a_noisy, t, cond)


@dataclass
class ParameterCount:
    total: int
    by_module: dict[str, int] = field(default_factory=dict)


def count_parameters(net: Module) -> ParameterCount:
    """Exact number of trainable scalars, grouped by top-level attribute."""
    by_module: dict[str, int] = {}
    total = 0
    for name, p in net.named_parameters():
        top = name.split(".", 1)[0]
        by_module[top] = by_module.get(top, 0) + p.size
        total += p.size
    return ParameterCount(total, by_module)
