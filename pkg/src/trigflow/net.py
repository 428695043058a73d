"""The network ``F_theta(x / sigma_d, c_noise(t))``.

A residual MLP trunk conditioned on a positional time embedding through
adaptive double normalization. Token-shaped inputs may add one self-attention
block. Parameters live in a flat ``dict[str, ndarray]`` so the same code runs
on plain arrays, duals and taped values.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .attention import attention

PNORM_EPS = 1e-8
LN_EPS = 1e-6


@dataclass(frozen=True)
class TimeEmbedConfig:
    """``embed_dim / 2`` geometric frequencies topping out at ``2 pi scale``."""

    embed_dim: int = 64
    scale: float = 0.02
    # ratio between the highest and lowest frequency
    span: float = 1e3

    def __post_init__(self):
        if self.embed_dim < 2 or self.embed_dim % 2:
            raise ValueError(f"embed_dim must be even and positive, got {self.embed_dim}")
        if not self.scale > 0 or not self.span >= 1:
            raise ValueError("scale must be positive and span at least 1")

    @property
    def freqs(self) -> np.ndarray:
        k = self.embed_dim // 2
        if k == 1:
            return np.array([2 * math.pi * self.scale])
        return 2 * math.pi * self.scale * self.span ** (np.arange(k) / (k - 1) - 1.0)


@dataclass(frozen=True)
class NetConfig:
    dim: int
    hidden: int = 256
    depth: int = 3
    cond_dim: int = 128
    embed: TimeEmbedConfig = field(default_factory=TimeEmbedConfig)
    # "trig" uses c_noise(t) = t; "legacy" uses log(sigma_d tan t)
    c_noise: str = "trig"
    sigma_d: float = 1.0
    attention: bool = False
    tokens: int = 8
    heads: int = 1
    attn_block: int = 4

    def __post_init__(self):
        if min(self.dim, self.hidden, self.depth, self.cond_dim) < 1:
            raise ValueError("network dimensions must be positive")
        if self.c_noise not in ("trig", "legacy"):
            raise ValueError(f"unknown c_noise mode {self.c_noise!r}")
        if self.attention:
            if self.dim % self.tokens:
                raise ValueError(f"dim {self.dim} not divisible into {self.tokens} tokens")
            if self.hidden % self.heads:
                raise ValueError("hidden width must be divisible by heads")

    @property
    def token_dim(self) -> int:
        return self.dim // self.tokens


def c_noise(t, mode: str = "trig", sigma_d: float = 1.0):
    if mode == "trig":
        return t
    if mode == "legacy":
        return ad.log(sigma_d * ad.tan(t))
    raise ValueError(f"unknown c_noise mode {mode!r}")


def pos_time_embed(t, cfg: TimeEmbedConfig):
    """``[sin(w t), cos(w t)]`` for a 1-D batch of times; shape ``(B, embed_dim)``."""
    tb = ad.reshape(t, (-1, 1)) if isinstance(t, ad._Traced) else np.reshape(t, (-1, 1))
    arg = tb * cfg.freqs
    return ad.concat([ad.sin(arg), ad.cos(arg)], axis=-1)


def pixel_norm(v, eps: float = PNORM_EPS):
    return v / ad.sqrt(ad.mean(v * v, axis=-1, keepdims=True) + eps)


def layer_norm(x, eps: float = LN_EPS):
    xc = x - ad.mean(x, axis=-1, keepdims=True)
    return xc / ad.sqrt(ad.mean(xc * xc, axis=-1, keepdims=True) + eps)


def ada_double_norm(x, cond, p: dict, prefix: str):
    """``layer_norm(x) * pnorm(s(cond)) + pnorm(b(cond))``."""
    s = cond @ p[prefix + ".Ws"] + p[prefix + ".bs"]
    b = cond @ p[prefix + ".Wb"] + p[prefix + ".bb"]
    xs = ad.value_of(x).shape
    if ad.value_of(s).shape[-1] != xs[-1]:
        raise ValueError(f"norm width {ad.value_of(s).shape[-1]} does not match features {xs[-1]}")
    if len(xs) == 3:
        s = ad.reshape(s, (xs[0], 1, xs[-1])) if isinstance(s, ad._Traced) else s[:, None, :]
        b = ad.reshape(b, (xs[0], 1, xs[-1])) if isinstance(b, ad._Traced) else b[:, None, :]
    return layer_norm(x) * pixel_norm(s) + pixel_norm(b)


def _dense(rng, n_in, n_out, gain=1.0):
    return rng.normal(0.0, gain / math.sqrt(n_in), size=(n_in, n_out))


def _norm_params(p, rng, prefix, cond_dim, width):
    p[prefix + ".Ws"] = _dense(rng, cond_dim, width, 0.1)
    p[prefix + ".bs"] = np.ones(width)
    p[prefix + ".Wb"] = _dense(rng, cond_dim, width, 0.1)
    # pnorm has a 1/sqrt(eps) slope at zero, so b starts away from it
    p[prefix + ".bb"] = rng.normal(0.0, 1.0, size=width)


def init_params(cfg: NetConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    p: dict[str, np.ndarray] = {}
    h, c, e = cfg.hidden, cfg.cond_dim, cfg.embed.embed_dim
    p["temb1.W"] = _dense(rng, e, c)
    p["temb1.b"] = np.zeros(c)
    p["temb2.W"] = _dense(rng, c, c)
    p["temb2.b"] = np.zeros(c)
    n_in = cfg.token_dim if cfg.attention else cfg.dim
    p["in.W"] = _dense(rng, n_in, h)
    p["in.b"] = np.zeros(h)
    if cfg.attention:
        p["pos"] = rng.normal(0.0, 0.1, size=(cfg.tokens, h))
        _norm_params(p, rng, "attn.norm", c, h)
        for name in ("q", "k", "v", "o"):
            p[f"attn.{name}"] = _dense(rng, h, h)
    for i in range(cfg.depth):
        _norm_params(p, rng, f"l{i}.norm", c, h)
        p[f"l{i}.W"] = _dense(rng, h, h)
        p[f"l{i}.b"] = np.zeros(h)
    _norm_params(p, rng, "out.norm", c, h)
    p["out.W"] = np.zeros((h, n_in))
    p["out.b"] = np.zeros(n_in)
    return p


def time_cond(p, t, cfg: NetConfig):
    emb = pos_time_embed(c_noise(t, cfg.c_noise, cfg.sigma_d), cfg.embed)
    h = ad.silu(emb @ p["temb1.W"] + p["temb1.b"])
    return ad.silu(h @ p["temb2.W"] + p["temb2.b"])


def _attn_block(p, h, cond, cfg: NetConfig):
    b, n, w = ad.value_of(h).shape
    nh, hd = cfg.heads, w // cfg.heads
    a = ada_double_norm(h, cond, p, "attn.norm")

    def heads(m):
        return ad.transpose(ad.reshape(a @ m, (b, n, nh, hd)), (0, 2, 1, 3))

    o = attention(heads(p["attn.q"]), heads(p["attn.k"]), heads(p["attn.v"]), cfg.attn_block)
    o = ad.reshape(ad.transpose(o, (0, 2, 1, 3)), (b, n, w))
    return h + o @ p["attn.o"]


def forward_F(p, u, t, cfg: NetConfig):
    """Network output for inputs ``u = x_t / sigma_d`` of shape ``(B, dim)``."""
    bsz = ad.value_of(u).shape[0]
    if np.ndim(ad.value_of(t)) == 0:
        t = ad.broadcast_to(t, (bsz,))
    cond = time_cond(p, t, cfg)
    if cfg.attention:
        u = ad.reshape(u, (bsz, cfg.tokens, cfg.token_dim))
        h = u @ p["in.W"] + p["in.b"] + p["pos"]
        h = _attn_block(p, h, cond, cfg)
    else:
        h = u @ p["in.W"] + p["in.b"]
    for i in range(cfg.depth):
        a = ada_double_norm(h, cond, p, f"l{i}.norm")
        h = h + ad.silu(a @ p[f"l{i}.W"] + p[f"l{i}.b"])
    a = ada_double_norm(h, cond, p, "out.norm")
    out = ad.silu(a) @ p["out.W"] + p["out.b"]
    if cfg.attention:
        out = ad.reshape(out, (bsz, cfg.dim))
    return out


class Net:
    """Binds a config to :func:`forward_F` and :func:`init_params`."""

    def __init__(self, cfg: NetConfig):
        self.cfg = cfg

    def init(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        return init_params(self.cfg, rng)

    def apply(self, params, u, t):
        return forward_F(params, u, t, self.cfg)

    def bind(self, params):
        """``F(u, t)`` closure over fixed parameters."""
        return lambda u, t: forward_F(params, u, t, self.cfg)
