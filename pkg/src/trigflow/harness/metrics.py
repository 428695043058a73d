"""Sample-based distribution distances and mode statistics."""
from __future__ import annotations

import numpy as np

CHUNK = 2048


def _check(a, b):
    a = np.asarray(a, dtype=np.float64).reshape(len(a), -1)
    b = np.asarray(b, dtype=np.float64).reshape(len(b), -1)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("distance between empty sample sets")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    return a, b


def _mean_abs_1d(a, b):
    """``E|a - b|`` over all pairs in O((n + m) log(n + m))."""
    b = np.sort(b)
    cb = np.concatenate([[0.0], np.cumsum(b)])
    k = np.searchsorted(b, a, side="right")
    below = a * k - cb[k]
    above = (cb[-1] - cb[k]) - a * (len(b) - k)
    return float((below + above).sum() / (len(a) * len(b)))


def _mean_dist(a, b):
    tot = 0.0
    for i in range(0, len(a), CHUNK):
        blk = a[i:i + CHUNK]
        d2 = (blk * blk).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2 * blk @ b.T
        tot += np.sqrt(np.maximum(d2, 0.0)).sum()
    return tot / (len(a) * len(b))


def energy_distance(a, b) -> float:
    """``E|X-Y| - E|X-X'|/2 - E|Y-Y'|/2`` (V-statistic, so identical sets give 0)."""
    a, b = _check(a, b)
    if a.shape[1] == 1:
        f = _mean_abs_1d
        a, b = a[:, 0], b[:, 0]
    else:
        f = _mean_dist
    return max(f(a, b) - 0.5 * f(a, a) - 0.5 * f(b, b), 0.0)


def sliced_wasserstein(a, b, n_proj: int = 128, seed: int = 0) -> float:
    """Mean 1-Wasserstein distance over random 1-D projections."""
    a, b = _check(a, b)
    dirs = np.random.default_rng(seed).normal(size=(a.shape[1], n_proj))
    dirs /= np.linalg.norm(dirs, axis=0, keepdims=True)
    qs = (np.arange(512) + 0.5) / 512
    pa = np.quantile(a @ dirs, qs, axis=0)
    pb = np.quantile(b @ dirs, qs, axis=0)
    return float(np.abs(pa - pb).mean())


DISTANCES = {"energy": energy_distance, "sliced_w": sliced_wasserstein}


def distribution_distance(a, b, kind: str = "energy") -> float:
    if kind not in DISTANCES:
        raise ValueError(f"unknown distance {kind!r}")
    return DISTANCES[kind](a, b)


def mode_masses(samples, centers) -> np.ndarray:
    """Fraction of samples nearest to each center."""
    s = np.asarray(samples, dtype=np.float64)
    d = ((s[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
    return np.bincount(d.argmin(1), minlength=len(centers)) / len(s)


def permutation_threshold(a, b, n_perm: int = 200, q: float = 0.95, seed: int = 0) -> float:
    """Null quantile of the energy distance under random relabeling of the pooled set."""
    a, b = _check(a, b)
    pool = np.concatenate([a, b])
    rng = np.random.default_rng(seed)
    null = []
    for _ in range(n_perm):
        idx = rng.permutation(len(pool))
        null.append(energy_distance(pool[idx[:len(a)]], pool[idx[len(a):]]))
    return float(np.quantile(null, q))
