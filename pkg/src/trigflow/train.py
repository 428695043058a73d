"""Continuous- and discrete-time consistency training in TrigFlow.

Covers the PF-ODE tangent (training and distillation estimates), the
rearranged JVP, tangent normalization and warmup, the adaptive weight
``w_phi(t)``, the stop-gradient MSE loss, EMA, diffusion pretraining, and
the discrete-time variant on an EDM-spaced grid.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from . import autodiff as ad
from .core import (
    ProposalParams, clamp_t, cm_output, diffusion_loss, forward_process, per_sample,
    sample_t, velocity_target,
)
from .net import Net, TimeEmbedConfig, pos_time_embed
from .samplers import RHO, SIGMA_MAX, SIGMA_MIN

TANGENT_C = 0.1
WARMUP_ITERS = 10_000


class TrainingDiverged(FloatingPointError):
    """Raised when a step produces a non-finite loss."""


@dataclass(frozen=True)
class TangentConfig:
    c: float = TANGENT_C
    warmup: int = WARMUP_ITERS
    mode: str = "normalize"

    def __post_init__(self):
        if self.mode not in ("normalize", "clip", "raw"):
            raise ValueError(f"unknown tangent mode {self.mode!r}")
        if self.c < 0 or self.warmup < 0:
            raise ValueError("c and warmup must be non-negative")
        if self.mode == "normalize" and self.c <= 0:
            raise ValueError("normalize mode needs c > 0")

    def ramp(self, iteration: int) -> float:
        return 1.0 if self.warmup == 0 else min(1.0, iteration / self.warmup)


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-11


@dataclass(frozen=True)
class WeightConfig:
    """``w_phi(t)``: fixed time features followed by one zero-initialized linear layer."""

    embed: TimeEmbedConfig = field(
        default_factory=lambda: TimeEmbedConfig(embed_dim=64, scale=1.0, span=50.0)
    )


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "cd"
    proposal: ProposalParams = field(default_factory=ProposalParams)
    tangent: TangentConfig = field(default_factory=TangentConfig)
    adam: AdamConfig = field(default_factory=AdamConfig)
    weight: WeightConfig = field(default_factory=WeightConfig)
    ema_decay: float = 0.9999

    def __post_init__(self):
        if self.mode not in ("ct", "cd"):
            raise ValueError(f"unknown training mode {self.mode!r}")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")


@dataclass
class AdamState:
    m: dict
    v: dict
    count: int = 0


@dataclass
class TrainState:
    theta: dict
    phi: dict
    ema: dict
    opt: AdamState
    iteration: int
    rng: np.random.Generator


# ---------------------------------------------------------------------------
# optimizer and EMA


def adam_init(params: dict) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(v) for k, v in params.items()},
        v={k: np.zeros_like(v) for k, v in params.items()},
    )


def adam_update(params: dict, grads: dict, st: AdamState, cfg: AdamConfig):
    count = st.count + 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1, c2 = 1.0 - b1 ** count, 1.0 - b2 ** count
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        m = b1 * st.m[k] + (1.0 - b1) * g
        v = b2 * st.v[k] + (1.0 - b2) * g * g
        new_p[k] = p - cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(new_m, new_v, count)


def ema_update(ema: dict, params: dict, decay: float) -> dict:
    if not 0.0 <= decay < 1.0:
        raise ValueError("decay must lie in [0, 1)")
    return {k: decay * ema[k] + (1.0 - decay) * params[k] for k in ema}


def _prefixed(prefix, d):
    return {prefix + k: v for k, v in d.items()}


def _split(prefix, d):
    n = len(prefix)
    return {k[n:]: v for k, v in d.items() if k.startswith(prefix)}


def init_state(theta: dict, cfg: TrainConfig, seed: int) -> TrainState:
    phi = weight_init(cfg.weight)
    return TrainState(
        theta={k: v.copy() for k, v in theta.items()},
        phi=phi,
        ema={k: v.copy() for k, v in theta.items()},
        opt=adam_init({**_prefixed("F/", theta), **_prefixed("w/", phi)}),
        iteration=0,
        rng=np.random.default_rng(seed),
    )


def apply_update(state: TrainState, grads_theta, grads_phi, cfg: TrainConfig) -> TrainState:
    params = {**_prefixed("F/", state.theta), **_prefixed("w/", state.phi)}
    grads = {**_prefixed("F/", grads_theta), **_prefixed("w/", grads_phi)}
    new, opt = adam_update(params, grads, state.opt, cfg.adam)
    theta = _split("F/", new)
    return TrainState(
        theta=theta,
        phi=_split("w/", new),
        ema=ema_update(state.ema, theta, cfg.ema_decay),
        opt=opt,
        iteration=state.iteration + 1,
        rng=state.rng,
    )


# ---------------------------------------------------------------------------
# adaptive weight


def weight_init(cfg: WeightConfig) -> dict:
    return {"W": np.zeros(cfg.embed.embed_dim), "b": np.zeros(1)}


def weight_apply(phi, t, cfg: WeightConfig):
    """``w_phi(t)`` for a 1-D batch of times."""
    return pos_time_embed(t, cfg.embed) @ phi["W"] + phi["b"]


# ---------------------------------------------------------------------------
# tangents


def pfode_estimate(mode: str, x0, z, t, sigma_d: float, teacher=None, x_t=None):
    """``dx_t/dt`` from the sample pair (training) or a pretrained model (distillation)."""
    if mode == "ct":
        return velocity_target(x0, z, t)
    if mode == "cd":
        if teacher is None:
            raise ValueError("distillation mode needs a teacher")
        if x_t is None:
            x_t = forward_process(x0, z, t)
        return sigma_d * teacher(x_t / sigma_d, t)
    raise ValueError(f"unknown mode {mode!r}")


def tangent_g(F_minus, x_t, t, dxdt, r: float, sigma_d: float, return_F: bool = False):
    """Tangent ``cos(t) df/dt`` with the warmup factor ``r`` on the ``sin(t)`` term.

    ``F_minus`` is evaluated once in forward mode at ``(x_t / sigma_d, t)``
    with tangent ``(cos sin dxdt, cos sin sigma_d)``, which yields
    ``cos(t) sin(t) sigma_d dF/dt`` without forming ``dF/dt`` itself.
    """
    t = np.asarray(t, dtype=np.float64)
    c, s = np.cos(t), np.sin(t)
    cs = c * s
    F, jv = ad.jvp_eval(
        lambda a: F_minus(a[0], a[1]),
        (x_t / sigma_d, t),
        (per_sample(cs, x_t) * dxdt, cs * sigma_d),
    )
    cc, csc = per_sample(c * c, x_t), per_sample(cs, x_t)
    g = -cc * (sigma_d * F - dxdt) - r * (csc * x_t + jv)
    return (g, F) if return_F else g


def tangent_g_naive(F_minus, x_t, t, dxdt, r: float, sigma_d: float):
    """Same tangent through a plain ``(dx/dt, 1)`` JVP, scaled afterwards."""
    t = np.asarray(t, dtype=np.float64)
    c, s = per_sample(np.cos(t), x_t), per_sample(np.sin(t), x_t)
    F, dF = ad.jvp_eval(lambda a: F_minus(a[0] / sigma_d, a[1]), (x_t, t), (dxdt, np.ones_like(t)))
    return -c * c * (sigma_d * F - dxdt) - r * c * s * (x_t + sigma_d * dF)


def cm_total_derivative(F_minus, x_t, t, dxdt, sigma_d: float):
    """``d f(x_t, t)/dt`` along ``dxdt`` by a JVP of the whole consistency map."""
    t = np.asarray(t, dtype=np.float64)
    _, df = ad.jvp_eval(
        lambda a: cm_output(F_minus, a[0], a[1], sigma_d), (x_t, t), (dxdt, np.ones_like(t))
    )
    return df


def _sample_norms(g):
    g = np.asarray(g)
    return np.sqrt((g * g).reshape(len(g), -1).sum(axis=1))


def normalize_tangent(g, cfg: TangentConfig):
    g = np.asarray(g, dtype=np.float64)
    if cfg.mode == "raw":
        return g
    if cfg.mode == "clip":
        return np.clip(g, -1.0, 1.0)
    return g / per_sample(_sample_norms(g) + cfg.c, g)


# ---------------------------------------------------------------------------
# losses


def scm_loss(F_theta, w, g, dim: int):
    """Batch mean of ``e^w / D ||F - stopgrad(F) - g||^2 - w``; ``g`` is detached."""
    diff = F_theta - ad.stopgrad(F_theta) - g
    sq = diff * diff
    axes = tuple(range(1, np.ndim(ad.value_of(sq))))
    per = ad.exp(w) * ad.sum(sq, axis=axes) / dim - w
    return ad.mean(per)


def _check_finite(loss, t, g, w):
    if not np.isfinite(loss):
        gn = _sample_norms(g)
        raise TrainingDiverged(
            f"non-finite loss {loss}: t in [{np.min(t):.4g}, {np.max(t):.4g}], "
            f"|g| max {np.max(gn):.4g}, w range [{np.min(w):.4g}, {np.max(w):.4g}]"
        )


def _metrics(loss, g, w):
    gn = _sample_norms(g)
    q = np.quantile(w, [0.1, 0.5, 0.9])
    return {
        "loss": float(loss), "g_norm_mean": float(gn.mean()), "g_norm_max": float(gn.max()),
        "w_q10": float(q[0]), "w_q50": float(q[1]), "w_q90": float(q[2]),
    }


def consistency_grads(state, net: Net, cfg: TrainConfig, x_t, t, g, sigma_d):
    """Normalize ``g`` and differentiate the weighted loss w.r.t. ``theta`` and ``phi``."""
    g = normalize_tangent(g, cfg.tangent)
    dim = int(np.prod(x_t.shape[1:]))
    u = x_t / sigma_d

    def loss_fn(p):
        F = net.apply(_split("F/", p), u, t)
        w = weight_apply(_split("w/", p), t, cfg.weight)
        return scm_loss(F, w, g, dim), w

    params = {**_prefixed("F/", state.theta), **_prefixed("w/", state.phi)}
    loss, grads, w = ad.grad_eval(loss_fn, params, has_aux=True)
    _check_finite(loss, t, g, w)
    return _split("F/", grads), _split("w/", grads), _metrics(loss, g, w)


def consistency_inputs(state: TrainState, x0, cfg: TrainConfig, sigma_d: float, net: Net,
                       teacher=None):
    """Draw ``(z, t)`` and assemble ``(x_t, t, g)`` for one continuous-time step."""
    if cfg.mode == "cd" and teacher is None:
        raise ValueError("distillation mode needs a teacher")
    x0 = np.asarray(x0, dtype=np.float64)
    z = state.rng.normal(0.0, sigma_d, size=x0.shape)
    t = sample_t(cfg.proposal, sigma_d, state.rng, size=len(x0))
    x_t = forward_process(x0, z, t)
    dxdt = pfode_estimate(cfg.mode, x0, z, t, sigma_d, teacher, x_t=x_t)
    r = cfg.tangent.ramp(state.iteration)
    return x_t, t, tangent_g(net.bind(state.theta), x_t, t, dxdt, r, sigma_d)


def train_step(state: TrainState, x0, net: Net, cfg: TrainConfig, sigma_d: float, teacher=None):
    """One continuous-time consistency update (training or distillation)."""
    x_t, t, g = consistency_inputs(state, x0, cfg, sigma_d, net, teacher)
    g_theta, g_phi, metrics = consistency_grads(state, net, cfg, x_t, t, g, sigma_d)
    return apply_update(state, g_theta, g_phi, cfg), metrics


# ---------------------------------------------------------------------------
# diffusion pretraining


def diffusion_train_step(state: TrainState, x0, net: Net, proposal: ProposalParams,
                         adam: AdamConfig, sigma_d: float, ema_decay: float = 0.999):
    x0 = np.asarray(x0, dtype=np.float64)
    z = state.rng.normal(0.0, sigma_d, size=x0.shape)
    t = sample_t(proposal, sigma_d, state.rng, size=len(x0))
    loss, grads = ad.grad_eval(
        lambda p: diffusion_loss(lambda u, tt: net.apply(p, u, tt), x0, z, t, sigma_d),
        state.theta,
    )
    if not np.isfinite(loss):
        raise TrainingDiverged(f"non-finite diffusion loss {loss} at iteration {state.iteration}")
    params, opt = adam_update(_prefixed("F/", state.theta), _prefixed("F/", grads),
                              state.opt, adam)
    theta = _split("F/", params)
    new = TrainState(theta, state.phi, ema_update(state.ema, theta, ema_decay), opt,
                     state.iteration + 1, state.rng)
    return new, {"loss": float(loss)}


# ---------------------------------------------------------------------------
# discrete time


@dataclass(frozen=True)
class DiscreteGrid:
    """Times ``0 = t_0 < ... < t_N`` and categorical weights over intervals ``1..N``."""

    times: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("grid must be strictly increasing")
        if self.weights.shape != (self.times.size - 1,):
            raise ValueError("one weight per interval")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must sum to 1")

    @property
    def n(self) -> int:
        return self.times.size - 1

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Interval indices in ``1..N``."""
        return 1 + rng.choice(self.n, size=size, p=self.weights)


def edm_sigmas(n: int, sigma_min=SIGMA_MIN, sigma_max=SIGMA_MAX, rho=RHO) -> np.ndarray:
    """Increasing EDM spacing ``sigma_0 = sigma_min ... sigma_n = sigma_max``."""
    i = np.arange(n + 1) / n
    a, b = sigma_min ** (1 / rho), sigma_max ** (1 / rho)
    return (a + i * (b - a)) ** rho


def edm_time_grid(n: int, sigma_d: float, proposal: ProposalParams = ProposalParams()) -> DiscreteGrid:
    if n < 2:
        raise ValueError("need at least 2 intervals")
    sig = edm_sigmas(n)
    times = np.arctan(sig / sigma_d)
    times[0] = 0.0
    # proposal mass of each cell in log(sigma) = log(sigma_d tan t)
    cdf = ndtr((np.log(sig) - proposal.p_mean) / proposal.p_std)
    cdf[0] = 0.0
    mass = np.diff(cdf)
    return DiscreteGrid(times, mass / mass.sum())


def ddim_reference(teacher, x_t, t, t_prev, sigma_d: float, F_pre=None):
    """One teacher DDIM step from ``t`` back to ``t_prev``."""
    if F_pre is None:
        F_pre = teacher(x_t / sigma_d, t)
    h = per_sample(np.asarray(t) - np.asarray(t_prev), x_t)
    return np.cos(h) * x_t - sigma_d * np.sin(h) * F_pre


def dscd_delta(F_minus, teacher, x_t, t, t_prev, r: float, sigma_d: float):
    """Finite-difference tangent between ``t`` and the previous grid time."""
    t = np.asarray(t, dtype=np.float64)
    t_prev = np.asarray(t_prev, dtype=np.float64)
    if np.any(t <= t_prev):
        raise ValueError("need t > t'")
    F_pre = teacher(x_t / sigma_d, t)
    x_prev = ddim_reference(teacher, x_t, t, t_prev, sigma_d, F_pre=F_pre)
    Fm = F_minus(x_t / sigma_d, t)
    Fm_prev = F_minus(x_prev / sigma_d, t_prev)
    col = lambda a: per_sample(a, x_t)  # noqa: E731
    h = t - t_prev
    return (
        -col(np.cos(t_prev)) * (sigma_d * Fm - sigma_d * F_pre)
        - r * col(np.sin(t_prev)) * (
            x_t + (sigma_d * col(np.cos(h)) * Fm - sigma_d * Fm_prev) / col(np.sin(h))
        )
    )


def dscd_delta_direct(F_minus, teacher, x_t, t, t_prev, sigma_d: float):
    """``(f(x_t, t) - f(x_t', t')) / sin(t - t')`` with ``x_t'`` from the teacher."""
    x_prev = ddim_reference(teacher, x_t, t, t_prev, sigma_d)
    num = cm_output(F_minus, x_t, t, sigma_d) - cm_output(F_minus, x_prev, t_prev, sigma_d)
    return num / per_sample(np.sin(np.asarray(t) - np.asarray(t_prev)), x_t)


def dscd_train_step(state: TrainState, x0, net: Net, cfg: TrainConfig, grid: DiscreteGrid,
                    sigma_d: float, teacher):
    if teacher is None:
        raise ValueError("discrete-time distillation needs a teacher")
    x0 = np.asarray(x0, dtype=np.float64)
    z = state.rng.normal(0.0, sigma_d, size=x0.shape)
    idx = grid.sample(state.rng, len(x0))
    t, t_prev = grid.times[idx], grid.times[idx - 1]
    x_t = forward_process(x0, z, t)
    r = cfg.tangent.ramp(state.iteration)
    delta = dscd_delta(net.bind(state.theta), teacher, x_t, t, t_prev, r, sigma_d)
    g = per_sample(np.cos(t), x_t) * delta
    g_theta, g_phi, metrics = consistency_grads(state, net, cfg, x_t, t, g, sigma_d)
    return apply_update(state, g_theta, g_phi, cfg), metrics


def clone_state(state: TrainState) -> TrainState:
    return copy.deepcopy(state)


def prior_weight(t, sigma_d: float):
    """``1 / (sigma_d tan t)`` with ``t`` clamped away from 0."""
    return 1.0 / (sigma_d * np.tan(clamp_t(np.asarray(t, dtype=np.float64))))
