"""Adaptive variational score distillation for a one-step consistency generator.

The generator is the consistency model at ``t = pi/2``:
``g(z') = -sigma_d F_theta(z' / sigma_d, pi/2)``. An auxiliary diffusion model
``F_aux`` tracks the diffused generator distribution; the generator follows
the difference between the pretrained and auxiliary predictions.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .core import HALF_PI, ProposalParams, diffusion_loss, forward_process, sample_t
from .net import Net
from .train import (
    AdamConfig, AdamState, TrainConfig, TrainState, WeightConfig, adam_init, adam_update,
    apply_update, consistency_grads, consistency_inputs, weight_apply, weight_init,
)

LAMBDA_VSD = 1.0


@dataclass(frozen=True)
class VsdConfig:
    lam: float = LAMBDA_VSD
    gen_proposal: ProposalParams = field(default_factory=lambda: ProposalParams(0.4, 2.0))
    aux_proposal: ProposalParams = field(default_factory=ProposalParams)
    aux_adam: AdamConfig = field(default_factory=lambda: AdamConfig(lr=1e-3))
    psi_adam: AdamConfig = field(default_factory=lambda: AdamConfig(lr=1e-3))
    weight: WeightConfig = field(default_factory=WeightConfig)
    aux_updates: int = 1

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.aux_updates < 1:
            raise ValueError("need at least one auxiliary update per generator update")


@dataclass
class VsdState:
    aux: dict
    psi: dict
    aux_opt: AdamState
    psi_opt: AdamState
    rng: np.random.Generator


def init_vsd_state(aux_params: dict, cfg: VsdConfig, seed: int) -> VsdState:
    psi = weight_init(cfg.weight)
    return VsdState(
        aux={k: v.copy() for k, v in aux_params.items()},
        psi=psi,
        aux_opt=adam_init(aux_params),
        psi_opt=adam_init(psi),
        rng=np.random.default_rng(seed),
    )


def generator(F, z_prime, sigma_d: float):
    """``f(z', pi/2) = -sigma_d F(z' / sigma_d, pi/2)``."""
    n = ad.value_of(z_prime).shape[0]
    return -sigma_d * F(z_prime / sigma_d, np.full(n, HALF_PI))


def vsd_aux_loss(F_aux, x_gen, z, t, sigma_d: float):
    """Diffusion loss of the auxiliary model on detached generator samples."""
    return diffusion_loss(F_aux, ad.stopgrad(x_gen), z, t, sigma_d)


def vsd_generator_loss(F_theta, w, z_prime, z, t, teacher, F_aux, sigma_d: float):
    """``e^w / D ||g - stopgrad(g) + F_pre - F_aux||^2 - w`` on the diffused generator output.

    ``F_aux`` and ``teacher`` are evaluated on detached inputs so the score
    difference carries no gradient.
    """
    gen = generator(F_theta, z_prime, sigma_d)
    gen_sg = ad.stopgrad(gen)
    x_t = forward_process(gen_sg, z, t)
    u = x_t / sigma_d
    diff = ad.value_of(teacher(u, t)) - ad.value_of(F_aux(u, t))
    d = gen - gen_sg + diff
    sq = d * d
    dim = int(np.prod(np.shape(gen_sg)[1:]))
    axes = tuple(range(1, np.ndim(gen_sg)))
    return ad.mean(ad.exp(w) * ad.sum(sq, axis=axes) / dim - w)


def generator_grads(theta: dict, psi: dict, net: Net, cfg: VsdConfig, teacher, F_aux,
                    n: int, dim: int, sigma_d: float, rng: np.random.Generator):
    """Gradients of the generator loss w.r.t. ``theta`` and ``psi``."""
    z_prime = rng.normal(0.0, sigma_d, size=(n, dim))
    z = rng.normal(0.0, sigma_d, size=(n, dim))
    t = sample_t(cfg.gen_proposal, sigma_d, rng, size=n)

    def loss_fn(p):
        th = {k[2:]: v for k, v in p.items() if k.startswith("F/")}
        ps = {k[2:]: v for k, v in p.items() if k.startswith("w/")}
        w = weight_apply(ps, t, cfg.weight)
        F = lambda u, tt: net.apply(th, u, tt)  # noqa: E731
        return vsd_generator_loss(F, w, z_prime, z, t, teacher, F_aux, sigma_d)

    params = {**{"F/" + k: v for k, v in theta.items()}, **{"w/" + k: v for k, v in psi.items()}}
    loss, grads = ad.grad_eval(loss_fn, params)
    g_theta = {k[2:]: v for k, v in grads.items() if k.startswith("F/")}
    g_psi = {k[2:]: v for k, v in grads.items() if k.startswith("w/")}
    return loss, g_theta, g_psi


def aux_step(vs: VsdState, theta: dict, net: Net, aux_net: Net, cfg: VsdConfig,
             n: int, dim: int, sigma_d: float):
    """One update of the auxiliary diffusion model on fresh generator samples."""
    rng = vs.rng
    z_prime = rng.normal(0.0, sigma_d, size=(n, dim))
    x_gen = generator(net.bind(theta), z_prime, sigma_d)
    z = rng.normal(0.0, sigma_d, size=(n, dim))
    t = sample_t(cfg.aux_proposal, sigma_d, rng, size=n)
    loss, grads = ad.grad_eval(
        lambda p: vsd_aux_loss(aux_net.bind(p), x_gen, z, t, sigma_d), vs.aux
    )
    aux, opt = adam_update(vs.aux, grads, vs.aux_opt, cfg.aux_adam)
    return VsdState(aux, vs.psi, opt, vs.psi_opt, rng), loss


def _add_scaled(a: dict, b: dict, lam: float) -> dict:
    return {k: a[k] + lam * b[k] for k in a}


def vsd_train_step(state: TrainState, vs: VsdState, net: Net, aux_net: Net, cfg: VsdConfig,
                   cm_cfg: TrainConfig, n: int, dim: int, sigma_d: float, teacher):
    """Generator update by the VSD loss alone, then the auxiliary update(s)."""
    loss, g_theta, g_psi = generator_grads(state.theta, vs.psi, net, cfg, teacher,
                                           aux_net.bind(vs.aux), n, dim, sigma_d, vs.rng)
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite VSD loss at iteration {state.iteration}")
    zero_phi = {k: np.zeros_like(v) for k, v in state.phi.items()}
    new = apply_update(state, g_theta, zero_phi, cm_cfg)
    psi, psi_opt = adam_update(vs.psi, g_psi, vs.psi_opt, cfg.psi_adam)
    vs = VsdState(vs.aux, psi, vs.aux_opt, psi_opt, vs.rng)
    aux_loss = np.nan
    for _ in range(cfg.aux_updates):
        vs, aux_loss = aux_step(vs, new.theta, net, aux_net, cfg, n, dim, sigma_d)
    return new, vs, {"vsd_loss": float(loss), "aux_loss": float(aux_loss)}


def combined_scd_vsd_step(state: TrainState, vs: VsdState, x0, net: Net, aux_net: Net,
                          cfg: VsdConfig, cm_cfg: TrainConfig, sigma_d: float, teacher):
    """sCD loss plus ``lam`` times the VSD generator loss, then the auxiliary update(s).

    The sCD half consumes ``state.rng`` exactly as :func:`train_step` does and
    the VSD half draws only from ``vs.rng``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    n, dim = x0.shape[0], int(np.prod(x0.shape[1:]))
    x_t, t, g = consistency_inputs(state, x0, cm_cfg, sigma_d, net, teacher)
    g_theta, g_phi, metrics = consistency_grads(state, net, cm_cfg, x_t, t, g, sigma_d)
    vloss, v_theta, v_psi = generator_grads(state.theta, vs.psi, net, cfg, teacher,
                                            aux_net.bind(vs.aux), n, dim, sigma_d, vs.rng)
    if not np.isfinite(vloss):
        raise FloatingPointError(f"non-finite VSD loss at iteration {state.iteration}")
    new = apply_update(state, _add_scaled(g_theta, v_theta, cfg.lam), g_phi, cm_cfg)
    psi, psi_opt = adam_update(vs.psi, v_psi, vs.psi_opt, cfg.psi_adam)
    vs = VsdState(vs.aux, psi, vs.aux_opt, psi_opt, vs.rng)
    aux_loss = np.nan
    for _ in range(cfg.aux_updates):
        vs, aux_loss = aux_step(vs, new.theta, net, aux_net, cfg, n, dim, sigma_d)
    metrics.update(vsd_loss=float(vloss), aux_loss=float(aux_loss))
    return new, vs, metrics
