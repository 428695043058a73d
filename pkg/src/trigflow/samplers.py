"""PF-ODE solvers in TrigFlow time and few-step consistency sampling.

``F_eval(u, t)`` is the network on scaled inputs ``u = x / sigma_d`` and
per-sample times ``t`` of shape ``(B,)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import HALF_PI, T_EPS, cm_output, forward_process

SIGMA_MIN = 0.002
SIGMA_MAX = 80.0
RHO = 7.0
T_MID = 1.1


class NonFiniteError(FloatingPointError):
    def __init__(self, step: int, t: float):
        super().__init__(f"non-finite state after step {step} (t={t:.6g})")
        self.step = step
        self.t = t


def t_max_default(sigma_d: float) -> float:
    return math.atan(SIGMA_MAX / sigma_d)


@dataclass(frozen=True)
class TimeGrid:
    """Strictly decreasing times ``t_0 > t_1 > ... > t_N``."""

    times: np.ndarray

    def __post_init__(self):
        ts = np.asarray(self.times, dtype=np.float64)
        if ts.ndim != 1 or ts.size < 1:
            raise ValueError("a time grid needs at least one point")
        if np.any(ts < 0) or np.any(ts > HALF_PI):
            raise ValueError("grid times must lie in [0, pi/2]")
        if np.any(np.diff(ts) >= 0):
            raise ValueError("grid times must be strictly decreasing")
        object.__setattr__(self, "times", ts)

    @property
    def n_steps(self) -> int:
        return self.times.size - 1

    @classmethod
    def edm(cls, n_steps: int, sigma_d: float, sigma_min=SIGMA_MIN, sigma_max=SIGMA_MAX,
            rho=RHO, final_zero: bool = False) -> "TimeGrid":
        """EDM sampling spacing mapped through ``t = arctan(sigma / sigma_d)``."""
        if n_steps < 1:
            raise ValueError("n_steps must be at least 1")
        i = np.arange(n_steps + 1) / n_steps
        a, b = sigma_max ** (1 / rho), sigma_min ** (1 / rho)
        sig = (a + i * (b - a)) ** rho
        ts = np.arctan(sig / sigma_d)
        if final_zero:
            ts = np.append(ts, 0.0)
        return cls(ts)

    @classmethod
    def uniform(cls, n_steps: int, t_max: float, t_min: float) -> "TimeGrid":
        return cls(np.linspace(t_max, t_min, n_steps + 1))


@dataclass(frozen=True)
class SamplerConfig:
    method: str = "dpm2"
    steps: int = 32
    t_max: float | None = None
    t_min: float = 0.0

    def __post_init__(self):
        if self.method not in STEPPERS:
            raise ValueError(f"unknown sampler {self.method!r}; choose from {sorted(STEPPERS)}")
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if self.t_max is not None and not 0 <= self.t_min < self.t_max <= HALF_PI:
            raise ValueError("need 0 <= t_min < t_max <= pi/2")


def _col(t, x):
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        return t
    return t.reshape(t.shape + (1,) * (x.ndim - t.ndim))


def _times(t, x):
    return np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))


def velocity(x, t, F_eval, sigma_d):
    """PF-ODE drift ``sigma_d F(x / sigma_d, t)``."""
    return sigma_d * F_eval(x / sigma_d, _times(t, x))


def eps_from_F(x, t, F, sigma_d):
    """Noise prediction ``sin(t) x + cos(t) sigma_d F``."""
    t = _col(t, x)
    return np.sin(t) * x + np.cos(t) * sigma_d * F


def data_from_F(x, t, F, sigma_d):
    """Data prediction ``cos(t) x - sin(t) sigma_d F``."""
    t = _col(t, x)
    return np.cos(t) * x - np.sin(t) * sigma_d * F


def _check_order(s, t):
    if np.any(np.asarray(t) > np.asarray(s)):
        raise ValueError(f"step must move backwards in time (s={s}, t={t})")


def ddim_step(x_s, s, t, F_eval, sigma_d, F_s=None):
    _check_order(s, t)
    if F_s is None:
        F_s = F_eval(x_s / sigma_d, _times(s, x_s))
    h = _col(np.asarray(s) - np.asarray(t), x_s)
    return np.cos(h) * x_s - np.sin(h) * sigma_d * F_s


def logtan_ratio(s, t, s_prime):
    """``(log tan s - log tan s') / (log tan s - log tan t)``."""
    ls, lt, lp = (math.log(math.tan(float(v))) for v in (s, t, s_prime))
    if lp == ls:
        raise ValueError("degenerate ratio: s' equals s")
    return (ls - lp) / (ls - lt)


def logtan_midpoint(s, t):
    return math.atan(math.sqrt(math.tan(s) * math.tan(t)))


def dpm2_step(x_s, s, t, s_prime, eps_prev, F_eval, sigma_d, F_s=None):
    """Noise-prediction second-order update using ``eps`` at ``s'``."""
    _check_order(s, t)
    if F_s is None:
        F_s = F_eval(x_s / sigma_d, _times(s, x_s))
    r = logtan_ratio(s, t, s_prime)
    eps_s = eps_from_F(x_s, s, F_s, sigma_d)
    base = ddim_step(x_s, s, t, F_eval, sigma_d, F_s=F_s)
    return base - math.sin(s - t) / (2 * r * math.cos(s)) * (eps_prev - eps_s)


def dpmpp2_step(x_s, s, t, s_prime, d_prev, F_eval, sigma_d, F_s=None):
    """Data-prediction second-order update using ``D`` at ``s'``."""
    _check_order(s, t)
    if F_s is None:
        F_s = F_eval(x_s / sigma_d, _times(s, x_s))
    r = logtan_ratio(s, t, s_prime)
    d_s = data_from_F(x_s, s, F_s, sigma_d)
    base = ddim_step(x_s, s, t, F_eval, sigma_d, F_s=F_s)
    return base + math.sin(s - t) / (2 * r * math.sin(s)) * (d_prev - d_s)


def _step_2s(x, s, t, F_eval, sigma_d, convert, stepper):
    # intermediate point at the log-tan midpoint, then a second-order update
    # that reuses it as s'; a step ending at t = 0 falls back to DDIM
    F_s = F_eval(x / sigma_d, _times(s, x))
    if t <= 0.0:
        return ddim_step(x, s, t, F_eval, sigma_d, F_s=F_s)
    mid = logtan_midpoint(min(s, HALF_PI - T_EPS), t)
    x_mid = ddim_step(x, s, mid, F_eval, sigma_d, F_s=F_s)
    F_mid = F_eval(x_mid / sigma_d, _times(mid, x))
    return stepper(x, s, t, mid, convert(x_mid, mid, F_mid, sigma_d), F_eval, sigma_d, F_s=F_s)


def _ddim(x, s, t, F_eval, sigma_d):
    return ddim_step(x, s, t, F_eval, sigma_d)


def _dpm2(x, s, t, F_eval, sigma_d):
    return _step_2s(x, s, t, F_eval, sigma_d, eps_from_F, dpm2_step)


def _dpmpp2(x, s, t, F_eval, sigma_d):
    return _step_2s(x, s, t, F_eval, sigma_d, data_from_F, dpmpp2_step)


STEPPERS = {"ddim": _ddim, "dpm2": _dpm2, "dpmpp2": _dpmpp2}


def solve_pfode(x_init, grid: TimeGrid, method: str, F_eval, sigma_d: float):
    stepper = STEPPERS.get(method)
    if stepper is None:
        raise ValueError(f"unknown sampler {method!r}; choose from {sorted(STEPPERS)}")
    x = np.asarray(x_init, dtype=np.float64)
    ts = grid.times
    for i in range(grid.n_steps):
        x = stepper(x, float(ts[i]), float(ts[i + 1]), F_eval, sigma_d)
        if not np.all(np.isfinite(x)):
            raise NonFiniteError(i, float(ts[i + 1]))
    return x


def sample_pfode(F_eval, n: int, dim: int, sigma_d: float, rng: np.random.Generator,
                 cfg: SamplerConfig = SamplerConfig()):
    """Draw prior noise at ``t_max`` and integrate to ``t_min`` (EDM spacing, final DDIM to 0)."""
    t_max = cfg.t_max if cfg.t_max is not None else t_max_default(sigma_d)
    sigma_max = sigma_d * math.tan(t_max)
    grid = TimeGrid.edm(cfg.steps, sigma_d, sigma_max=sigma_max,
                        final_zero=cfg.t_min == 0.0)
    if cfg.t_min > 0:
        grid = TimeGrid.edm(cfg.steps, sigma_d, sigma_min=sigma_d * math.tan(cfg.t_min),
                            sigma_max=sigma_max)
    x = rng.normal(0.0, sigma_d, size=(n, dim))
    return solve_pfode(x, grid, cfg.method, F_eval, sigma_d)


def cm_sample(F_eval, n: int, dim: int, sigma_d: float, rng: np.random.Generator,
              n_steps: int = 1, t_mid: float = T_MID, t_max: float | None = None):
    """One- or two-step consistency sampling from ``t_max``."""
    if n_steps not in (1, 2):
        raise ValueError("consistency sampling supports 1 or 2 steps")
    t_max = t_max_default(sigma_d) if t_max is None else t_max
    x = rng.normal(0.0, sigma_d, size=(n, dim))
    out = cm_output(F_eval, x, np.full(n, t_max), sigma_d)
    if n_steps == 2:
        z = rng.normal(0.0, sigma_d, size=(n, dim))
        tm = np.full(n, t_mid)
        out = cm_output(F_eval, forward_process(out, z, tm), tm, sigma_d)
    return out
