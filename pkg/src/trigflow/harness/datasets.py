"""Toy datasets. Each returns i.i.d. rows of shape ``(n, dim)`` for a given generator."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

MIX_RADIUS = 2.0
MIX_STD = 0.2
MIX_MODES = 8


@dataclass(frozen=True)
class ToyDataset:
    name: str
    dim: int
    # closed-form diagonal covariance for zero-mean Gaussian sets, else None
    cov: np.ndarray | None = None

    @property
    def analytic(self) -> bool:
        return self.cov is not None

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return _SAMPLERS[self.name](self, n, rng)


def mixture_centers(k: int = MIX_MODES, radius: float = MIX_RADIUS) -> np.ndarray:
    a = 2 * math.pi * np.arange(k) / k
    return radius * np.stack([np.cos(a), np.sin(a)], axis=1)


def _gauss(ds, n, rng):
    return rng.normal(size=(n, ds.dim)) * np.sqrt(ds.cov)


def _mixture(ds, n, rng):
    c = mixture_centers()
    idx = rng.integers(0, len(c), size=n)
    return c[idx] + MIX_STD * rng.normal(size=(n, 2))


def _checkerboard(ds, n, rng):
    # 4 x 4 board on [-2, 2]^2, occupied cells where (i + j) is even
    i = rng.integers(0, 4, size=n)
    j = 2 * rng.integers(0, 2, size=n) + (i % 2)
    u = rng.uniform(size=(n, 2))
    return np.stack([i + u[:, 0], j + u[:, 1]], axis=1) - 2.0


def _tokens(ds, n, rng):
    # 8 tokens of 4 features sharing a random phase: a smooth ring-shaped sequence
    phase = rng.uniform(0, 2 * math.pi, size=(n, 1))
    ang = phase + np.arange(8)[None, :] * (math.pi / 4)
    feats = np.stack([np.cos(ang), np.sin(ang), np.cos(2 * ang), np.sin(2 * ang)], axis=-1)
    return (feats + 0.05 * rng.normal(size=feats.shape)).reshape(n, 32)


_SAMPLERS = {
    "gauss1d": _gauss, "gauss-nd": _gauss, "mixture2d": _mixture,
    "checkerboard2d": _checkerboard, "tokens8x4": _tokens,
}


def get_dataset(name: str, dim: int | None = None, std: float | None = None) -> ToyDataset:
    if name == "gauss1d":
        return ToyDataset(name, 1, np.array([(std or 2.0) ** 2]))
    if name == "gauss-nd":
        d = dim or 4
        return ToyDataset(name, d, np.geomspace(0.25, 4.0, d) * (std or 1.0) ** 2)
    if name == "mixture2d":
        return ToyDataset(name, 2)
    if name == "checkerboard2d":
        return ToyDataset(name, 2)
    if name == "tokens8x4":
        return ToyDataset(name, 32)
    raise ValueError(f"unknown dataset {name!r}; choose from {sorted(_SAMPLERS)}")
