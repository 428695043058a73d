"""TrigFlow diffusion process, CM parameterization and schedule conversions.

Time lives in ``[0, pi/2]``; ``x_t = cos(t) x0 + sin(t) z`` with
``z ~ N(0, sigma_d^2 I)``. Per-sample times are 1-D arrays of length ``B``
and broadcast against ``(B, ...)`` samples.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import optimize

from . import autodiff as ad

HALF_PI = 0.5 * math.pi
# clamp for quantities involving tan(t) or 1/sin(t)
T_EPS = 1e-5

FEval = Callable[[object, object], object]


@dataclass(frozen=True)
class DataStats:
    sigma_d: float
    dim: int

    def __post_init__(self):
        if not self.sigma_d > 0:
            raise ValueError(f"sigma_d must be positive, got {self.sigma_d}")
        if self.dim < 1:
            raise ValueError(f"dim must be positive, got {self.dim}")

    @classmethod
    def from_data(cls, x: np.ndarray) -> "DataStats":
        """Pooled per-coordinate standard deviation of a ``(N, D)`` sample."""
        x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
        return cls(sigma_d=float(np.sqrt(x.var(axis=0).mean())), dim=x.shape[1])


@dataclass(frozen=True)
class TrigTime:
    t: float

    def __post_init__(self):
        if not 0.0 <= self.t <= HALF_PI:
            raise ValueError(f"TrigFlow time must lie in [0, pi/2], got {self.t}")

    @property
    def cos(self) -> float:
        return math.cos(self.t)

    @property
    def sin(self) -> float:
        return math.sin(self.t)

    @property
    def tan(self) -> float:
        return math.tan(clamp_t(self.t))


@dataclass(frozen=True)
class ProposalParams:
    """Log-normal proposal: ``log(sigma_d tan t) ~ N(p_mean, p_std^2)``."""

    p_mean: float = -1.0
    p_std: float = 1.4

    def __post_init__(self):
        if not self.p_std > 0:
            raise ValueError(f"p_std must be positive, got {self.p_std}")


@dataclass(frozen=True)
class GenericSchedule:
    """``x_u = alpha(u) x0 + sigma(u) z`` with ``z ~ N(0, sigma_d^2 I)``."""

    name: str
    alpha: Callable[[np.ndarray], np.ndarray]
    sigma: Callable[[np.ndarray], np.ndarray]
    u_max: float = 1.0
    # closed-form map from TrigFlow time back to u, when available
    inverse: Callable[[np.ndarray], np.ndarray] | None = None


def flow_matching_schedule() -> GenericSchedule:
    return GenericSchedule(
        "flow_matching",
        alpha=lambda u: 1.0 - np.asarray(u, dtype=np.float64),
        sigma=lambda u: np.asarray(u, dtype=np.float64),
        u_max=1.0,
        inverse=lambda t: np.sin(t) / (np.sin(t) + np.cos(t)),
    )


def trigflow_schedule() -> GenericSchedule:
    return GenericSchedule("trigflow", np.cos, np.sin, u_max=HALF_PI, inverse=lambda t: t)


def edm_schedule(sigma_d: float) -> GenericSchedule:
    """EDM ``x = x0 + sigma eps`` written in the sigma_d-scaled noise convention."""
    return GenericSchedule(
        "edm",
        alpha=lambda s: np.ones_like(np.asarray(s, dtype=np.float64)),
        sigma=lambda s: np.asarray(s, dtype=np.float64) / sigma_d,
        u_max=np.inf,
        inverse=lambda t: sigma_d * np.tan(t),
    )


def clamp_t(t):
    return np.clip(t, T_EPS, HALF_PI - T_EPS)


def per_sample(t, like):
    """Reshape per-sample times ``(B,)`` to broadcast against ``like`` of shape ``(B, ...)``."""
    nd = len(np.shape(ad.value_of(like)))
    tshape = np.shape(ad.value_of(t))
    if len(tshape) == 1 and nd > 1:
        return ad.reshape(t, tshape + (1,) * (nd - 1)) if isinstance(t, ad._Traced) \
            else np.reshape(t, tshape + (1,) * (nd - 1))
    return t


def _check_shapes(a, b):
    if np.shape(ad.value_of(a)) != np.shape(ad.value_of(b)):
        raise ValueError(
            f"shape mismatch: {np.shape(ad.value_of(a))} vs {np.shape(ad.value_of(b))}"
        )


def forward_process(x0, z, t):
    _check_shapes(x0, z)
    tc = per_sample(t, x0)
    return ad.cos(tc) * x0 + ad.sin(tc) * z


def velocity_target(x0, z, t):
    _check_shapes(x0, z)
    tc = per_sample(t, x0)
    return ad.cos(tc) * z - ad.sin(tc) * x0


def cm_output(F: FEval, x_t, t, sigma_d: float):
    """Consistency function ``cos(t) x_t - sin(t) sigma_d F(x_t / sigma_d, t)``."""
    tc = per_sample(t, x_t)
    return ad.cos(tc) * x_t - ad.sin(tc) * sigma_d * F(x_t / sigma_d, t)


def diffusion_loss(F: FEval, x0, z, t, sigma_d: float):
    """Batch mean of ``||sigma_d F(x_t / sigma_d, t) - v_t||^2``."""
    x_t = forward_process(x0, z, t)
    v_t = velocity_target(x0, z, t)
    r = sigma_d * F(x_t / sigma_d, t) - v_t
    sq = r * r
    axes = tuple(range(1, np.ndim(ad.value_of(sq))))
    return ad.mean(ad.sum(sq, axis=axes) if axes else sq)


def sample_t(proposal: ProposalParams, sigma_d: float, rng: np.random.Generator, size=None):
    """``tau ~ N(p_mean, p_std^2)``, ``t = arctan(exp(tau) / sigma_d)``."""
    tau = rng.normal(proposal.p_mean, proposal.p_std, size=size)
    return tau_to_t(tau, sigma_d)


def tau_to_t(tau, sigma_d: float):
    return np.arctan(np.exp(tau) / sigma_d)


def edm_to_trigflow(sigma, x_sigma, sigma_d: float):
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma < 0):
        raise ValueError("EDM sigma must be non-negative")
    t = np.arctan(sigma / sigma_d)
    return t, per_sample(np.cos(t), x_sigma) * x_sigma


def trigflow_to_edm(t, x_t, sigma_d: float):
    t = np.asarray(t, dtype=np.float64)
    return sigma_d * np.tan(t), x_t / per_sample(np.cos(t), x_t)


def schedule_to_trigflow(sched: GenericSchedule, u, x):
    """Map ``(u, x_u)`` under ``sched`` to TrigFlow ``(t_hat, x_hat)``."""
    u = np.asarray(u, dtype=np.float64)
    a = np.asarray(sched.alpha(u), dtype=np.float64)
    s = np.asarray(sched.sigma(u), dtype=np.float64)
    interior = u > 0
    if np.any(a[interior] <= 0 if a.ndim else (a <= 0 and interior)):
        raise ValueError(f"schedule {sched.name!r} has alpha <= 0 at an interior time")
    norm = np.sqrt(a * a + s * s)
    t_hat = np.arctan2(s, a)
    return t_hat, x / per_sample(norm, x)


def trigflow_to_schedule(sched: GenericSchedule, t_hat, x_hat):
    """Inverse of :func:`schedule_to_trigflow`."""
    t_hat = np.asarray(t_hat, dtype=np.float64)
    if sched.inverse is not None:
        u = np.asarray(sched.inverse(t_hat), dtype=np.float64)
    else:
        def solve(th):
            if th == 0.0:
                return 0.0
            f = lambda uu: math.atan2(float(sched.sigma(uu)), float(sched.alpha(uu))) - th
            return optimize.brentq(f, 0.0, sched.u_max, xtol=1e-15, rtol=4 * np.finfo(float).eps)
        u = np.vectorize(solve, otypes=[np.float64])(t_hat)
    a = np.asarray(sched.alpha(u), dtype=np.float64)
    s = np.asarray(sched.sigma(u), dtype=np.float64)
    return u, x_hat * per_sample(np.sqrt(a * a + s * s), x_hat)


def snr(t):
    """Data-variance-invariant SNR ``1 / tan(t)^2``."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t <= 0):
        raise ValueError("SNR is infinite at t = 0")
    return 1.0 / np.tan(t) ** 2


def snr_standard(alpha, sigma, sigma_d: float):
    """``alpha^2 sigma_d^2 / sigma^2`` for a schedule with unit-variance noise."""
    return np.asarray(alpha) ** 2 * sigma_d ** 2 / np.asarray(sigma) ** 2
