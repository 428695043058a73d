"""Softmax attention with a single-pass, block-streamed JVP.

Scores ``x`` have shape ``(..., Lq, Lk)``; values ``V`` have shape
``(..., Lk, dv)``. Leading axes (batch, heads) and query rows are independent.
The kernel keeps per-row accumulators and consumes key blocks one at a time,
so the full ``Lq x Lk`` probability matrix is never materialized.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class AttnBlockState:
    """Running accumulators for one set of query rows.

    ``m``, ``l`` and ``mu`` have shape ``(..., Lq, 1)``; ``f_v``, ``f_tv`` and
    ``g`` have shape ``(..., Lq, dv)``. The empty state has ``m = -inf`` and
    zero accumulators.
    """

    m: np.ndarray
    l: np.ndarray  # noqa: E741
    f_v: np.ndarray
    f_tv: np.ndarray
    g: np.ndarray
    mu: np.ndarray

    @classmethod
    def empty(cls, rows_shape, dv: int) -> "AttnBlockState":
        rows_shape = tuple(rows_shape)
        col = rows_shape + (1,)
        mat = rows_shape + (dv,)
        return cls(
            m=np.full(col, -np.inf), l=np.zeros(col), f_v=np.zeros(mat),
            f_tv=np.zeros(mat), g=np.zeros(mat), mu=np.zeros(col),
        )

    @property
    def is_empty(self) -> bool:
        return bool(np.all(np.isneginf(self.m)))


def block_init(x_blk, tx_blk, v_blk, tv_blk) -> AttnBlockState:
    if x_blk.shape != tx_blk.shape or v_blk.shape != tv_blk.shape:
        raise ValueError("score/tangent or value/tangent shapes differ")
    if x_blk.shape[-1] != v_blk.shape[-2]:
        raise ValueError(f"{x_blk.shape[-1]} keys in scores but {v_blk.shape[-2]} value rows")
    m = x_blk.max(axis=-1, keepdims=True)
    e = np.exp(x_blk - m)
    et = e * tx_blk
    return AttnBlockState(
        m=m,
        l=e.sum(axis=-1, keepdims=True),
        f_v=e @ v_blk,
        f_tv=e @ tv_blk,
        g=et @ v_blk,
        mu=et.sum(axis=-1, keepdims=True),
    )


def merge(a: AttnBlockState, b: AttnBlockState) -> AttnBlockState:
    if a.m.shape != b.m.shape:
        raise ValueError(f"row shapes differ: {a.m.shape} vs {b.m.shape}")
    m = np.maximum(a.m, b.m)
    # rows where both sides are empty keep m = -inf and zero accumulators
    safe = np.where(np.isneginf(m), 0.0, m)
    ca = np.where(np.isneginf(a.m), 0.0, np.exp(a.m - safe))
    cb = np.where(np.isneginf(b.m), 0.0, np.exp(b.m - safe))
    return AttnBlockState(
        m=m,
        l=ca * a.l + cb * b.l,
        f_v=ca * a.f_v + cb * b.f_v,
        f_tv=ca * a.f_tv + cb * b.f_tv,
        g=ca * a.g + cb * b.g,
        mu=ca * a.mu + cb * b.mu,
    )


def finalize(state: AttnBlockState):
    if state.is_empty or np.any(state.l <= 0):
        raise ValueError("cannot finalize an empty attention state")
    y = state.f_v / state.l
    ty = state.g / state.l - (state.mu / state.l) * y + state.f_tv / state.l
    return y, ty


def attention_jvp(x, tx, v, tv, block_size: int = 64):
    """Stream key blocks of ``block_size`` through the accumulators."""
    x, tx, v, tv = (np.asarray(a, dtype=np.float64) for a in (x, tx, v, tv))
    if block_size < 1:
        raise ValueError("block_size must be positive")
    lk = x.shape[-1]
    if lk == 0:
        raise ValueError("attention over zero keys")
    state = AttnBlockState.empty(x.shape[:-1], v.shape[-1])
    for lo in range(0, lk, block_size):
        hi = min(lo + block_size, lk)
        blk = block_init(x[..., lo:hi], tx[..., lo:hi], v[..., lo:hi, :], tv[..., lo:hi, :])
        state = merge(state, blk)
    return finalize(state)


def softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def dense_attention_jvp_oracle(x, tx, v, tv):
    """Materialize ``p`` and apply the closed-form softmax JVP."""
    p = softmax(np.asarray(x, dtype=np.float64))
    y = p @ v
    tpv = (p * tx) @ v - (p * tx).sum(axis=-1, keepdims=True) * y
    return y, tpv + p @ tv


def score_jvp(q, k, tq, tk):
    """Scores ``Q K^T / sqrt(d)`` and their tangent."""
    scale = 1.0 / math.sqrt(q.shape[-1])
    kt = np.swapaxes(k, -1, -2)
    x = (q @ kt) * scale
    tx = (tq @ kt + q @ np.swapaxes(tk, -1, -2)) * scale
    return x, tx


def _softmax_traced(x):
    m = ad.stopgrad(ad.max(x, axis=-1, keepdims=True))
    e = ad.exp(x - m)
    return e / ad.sum(e, axis=-1, keepdims=True)


def naive_attention(q, k, v):
    """Attention composed from engine primitives (any evaluation mode)."""
    scale = 1.0 / math.sqrt(ad.value_of(q).shape[-1])
    x = ad.matmul(q, ad.swapaxes(k, -1, -2)) * scale
    return ad.matmul(_softmax_traced(x), v)


def attention(q, k, v, block_size: int = 64):
    """Scaled dot-product attention.

    Dual inputs take the streaming JVP kernel; taped inputs use the dense
    composition for reverse mode; plain arrays evaluate densely.
    """
    args = (q, k, v)
    if any(isinstance(a, ad.Var) for a in args):
        if any(isinstance(a, ad.Dual) for a in args):
            raise ad.UnsupportedOpError("attention", "mixed forward- and reverse-mode operands")
        return naive_attention(q, k, v)
    if not any(isinstance(a, ad.Dual) for a in args):
        return naive_attention(q, k, v)

    def split(a):
        if isinstance(a, ad.Dual):
            return a.primal, a.tangent
        a = np.asarray(a, dtype=np.float64)
        return a, np.zeros_like(a)

    (qp, qt), (kp, kt), (vp, vt) = split(q), split(k), split(v)
    x, tx = score_jvp(qp, kp, qt, kt)
    y, ty = attention_jvp(x, tx, vp, vt, block_size=block_size)
    return ad.Dual(y, ty)
