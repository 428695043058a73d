"""Numerical identities checked by ``selfcheck`` and the acceptance suite.

Each function returns the measured quantity (an error or a slope) so callers
apply their own tolerance.
"""
from __future__ import annotations

import math

import numpy as np

from .. import autodiff as ad
from ..attention import attention_jvp, dense_attention_jvp_oracle, naive_attention, score_jvp
from ..core import (
    HALF_PI, diffusion_loss, flow_matching_schedule, forward_process, schedule_to_trigflow,
)
from ..net import Net, NetConfig
from ..samplers import TimeGrid, solve_pfode
from ..train import cm_total_derivative, tangent_g, tangent_g_naive
from .oracles import analytic_F, exact_flow

FD_EPS = 1e-5


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-300))


def _fd(f, x, v, eps=FD_EPS):
    return (np.asarray(f(x + eps * v)) - np.asarray(f(x - eps * v))) / (2 * eps)


def random_mlp(rng, widths=(3, 8, 8, 2)):
    """Three-layer SiLU net as a parameter dict and a closure ``f(params, x)``."""
    p = {}
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        p[f"W{i}"] = rng.normal(size=(a, b)) / math.sqrt(a)
        p[f"b{i}"] = rng.normal(size=b) * 0.1

    def f(q, x):
        h = x
        n = len(widths) - 1
        for i in range(n):
            h = h @ q[f"W{i}"] + q[f"b{i}"]
            if i < n - 1:
                h = ad.silu(h)
        return h

    return p, f


# (name, function, domain sampler) for single-input primitives
def _unary_cases(rng):
    pos = lambda s: rng.uniform(0.5, 2.0, size=s)  # noqa: E731
    anyv = lambda s: rng.normal(size=s)  # noqa: E731
    small = lambda s: rng.uniform(-1.2, 1.2, size=s)  # noqa: E731
    return [
        ("neg", ad.neg, anyv), ("exp", ad.exp, anyv), ("log", ad.log, pos),
        ("sin", ad.sin, anyv), ("cos", ad.cos, anyv), ("tan", ad.tan, small),
        ("arctan", ad.arctan, anyv), ("sqrt", ad.sqrt, pos), ("silu", ad.silu, anyv),
        ("sum", lambda x: ad.sum(x, axis=1), anyv), ("mean", lambda x: ad.mean(x, axis=0), anyv),
        ("max", lambda x: ad.max(x, axis=1), anyv),
        ("broadcast", lambda x: ad.broadcast_to(x, (2,) + x.shape), anyv),
        ("slice", lambda x: x[1:, ::2], anyv),
        ("reshape", lambda x: ad.reshape(x, (-1,)), anyv),
        ("transpose", lambda x: ad.transpose(x), anyv),
    ]


def _binary_cases(rng):
    anyv = lambda s: rng.normal(size=s)  # noqa: E731
    return [
        ("add", ad.add, anyv, anyv), ("sub", ad.sub, anyv, anyv), ("mul", ad.mul, anyv, anyv),
        ("div", ad.div, anyv, lambda s: rng.uniform(0.5, 2.0, size=s) * rng.choice([-1, 1], size=s)),
        ("matmul", lambda a, b: ad.matmul(a, b.T), anyv, anyv),
        ("concat", lambda a, b: ad.concat([a, b], axis=1), anyv, anyv),
    ]


def primitive_errors(seed: int = 0) -> dict:
    """Per-primitive max of JVP-vs-FD and gradient-vs-FD relative errors."""
    rng = np.random.default_rng(seed)
    shape = (3, 4)
    out = {}
    for name, f, dom in _unary_cases(rng):
        x, v = dom(shape), rng.normal(size=shape)
        _, dy = ad.jvp_eval(f, x, v)
        fd = _fd(f, x, v)
        w = rng.normal(size=np.shape(fd))
        _, g = ad.grad_eval(lambda p: ad.sum(f(p["x"]) * w), {"x": x})
        out[name] = max(rel_err(dy, fd), rel_err((g["x"] * v).sum(), (fd * w).sum()))
    for name, f, da, db in _binary_cases(rng):
        a, b = da(shape), db(shape)
        va, vb = rng.normal(size=shape), rng.normal(size=shape)
        _, dy = ad.jvp_eval(lambda z: f(z[0], z[1]), (a, b), (va, vb))
        fd = (np.asarray(f(a + FD_EPS * va, b + FD_EPS * vb))
              - np.asarray(f(a - FD_EPS * va, b - FD_EPS * vb))) / (2 * FD_EPS)
        w = rng.normal(size=np.shape(fd))
        _, g = ad.grad_eval(lambda p: ad.sum(f(p["a"], p["b"]) * w), {"a": a, "b": b})
        out[name] = max(rel_err(dy, fd), rel_err((g["a"] * va).sum() + (g["b"] * vb).sum(), (fd * w).sum()))
    return out


def mlp_errors(seed: int = 0, trials: int = 5) -> dict:
    """JVP, per-coordinate gradient and duality errors on random 3-layer nets."""
    rng = np.random.default_rng(seed)
    jvp_e = grad_e = dual_e = 0.0
    for _ in range(trials):
        p, f = random_mlp(rng)
        x, v = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
        _, dy = ad.jvp_eval(lambda a: f(p, a), x, v)
        jvp_e = max(jvp_e, rel_err(dy, _fd(lambda a: f(p, a), x, v)))
        y = rng.normal(size=(5, 2))
        loss = lambda q: ad.mean((f(q, x) - y) ** 2)  # noqa: E731
        _, g = ad.grad_eval(loss, p)
        for k, val in p.items():
            fd = np.zeros_like(val)
            for idx in np.ndindex(val.shape):
                e = np.zeros_like(val)
                e[idx] = FD_EPS
                fd[idx] = (loss({**p, k: val + e}) - loss({**p, k: val - e})) / (2 * FD_EPS)
            grad_e = max(grad_e, rel_err(g[k], fd))
        # duality between reverse and forward mode on a scalar output
        sc = lambda a: ad.sum(ad.sin(f(p, a)))  # noqa: E731
        _, gx = ad.grad_eval(lambda q: sc(q["x"]), {"x": x})
        _, d = ad.jvp_eval(sc, x, v)
        dual_e = max(dual_e, rel_err((gx["x"] * v).sum(), d))
    return {"jvp": jvp_e, "grad": grad_e, "duality": dual_e}


def random_cm_net(rng, dim=3, sigma_d=0.8, attention=False):
    cfg = NetConfig(dim=8 if attention else dim, hidden=16, depth=2, cond_dim=16,
                    sigma_d=sigma_d, attention=attention, tokens=4, heads=2, attn_block=3)
    net = Net(cfg)
    p = net.init(rng)
    # a zero output layer would make every identity hold trivially
    p["out.W"] = rng.normal(size=p["out.W"].shape) / math.sqrt(cfg.hidden)
    return net, p


def tangent_identity_error(n: int = 20, seed: int = 0) -> float:
    """Assembled tangent at ``r = 1`` vs ``cos(t)`` times the whole-map JVP."""
    rng = np.random.default_rng(seed)
    ts = np.linspace(0.01, HALF_PI - 0.01, n)
    worst = 0.0
    for t in ts:
        sd = rng.uniform(0.3, 2.0)
        net, p = random_cm_net(rng, sigma_d=sd)
        F = net.bind(p)
        x = rng.normal(size=(4, 3)) * sd
        dxdt = rng.normal(size=(4, 3)) * sd
        tt = np.full(4, t)
        g = tangent_g(F, x, tt, dxdt, 1.0, sd)
        ref = np.cos(t) * cm_total_derivative(F, x, tt, dxdt, sd)
        worst = max(worst, rel_err(g, ref))
    return worst


def rearrangement_error(seed: int = 0, attention: bool = False) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for r in (0.0, 0.3, 1.0):
        net, p = random_cm_net(rng, attention=attention)
        d = net.cfg.dim
        x, dxdt = rng.normal(size=(6, d)), rng.normal(size=(6, d))
        t = rng.uniform(0.01, HALF_PI - 0.01, size=6)
        a = tangent_g(net.bind(p), x, t, dxdt, r, 0.8)
        b = tangent_g_naive(net.bind(p), x, t, dxdt, r, 0.8)
        worst = max(worst, rel_err(a, b))
    return worst


def grad_conversion_error(seed: int = 0) -> float:
    """``grad E[F^T y]`` vs ``grad E[||F - stopgrad(F) + y||^2] / 2`` on random ``y``."""
    rng = np.random.default_rng(seed)
    net, p = random_cm_net(rng)
    u = rng.normal(size=(6, 3))
    t = rng.uniform(0.05, 1.5, size=6)
    y = rng.normal(size=(6, 3))
    _, g1 = ad.grad_eval(lambda q: ad.mean(ad.sum(net.apply(q, u, t) * y, axis=1)), p)

    def mse(q):
        F = net.apply(q, u, t)
        d = F - ad.stopgrad(F) + y
        return 0.5 * ad.mean(ad.sum(d * d, axis=1))

    _, g2 = ad.grad_eval(mse, p)
    return max(rel_err(g2[k], g1[k]) for k in p if np.abs(g1[k]).max() > 0)


def sampler_slopes(steps=(8, 16, 32, 64, 128), seed: int = 0) -> dict:
    """Log-log slopes of endpoint error vs step count on a Gaussian PF-ODE."""
    sd = 1.0
    lam = np.array([4.0, 0.25, 1.5])
    F = analytic_F(lam, sd)
    x = np.random.default_rng(seed).normal(size=(32, 3))
    t0, t1 = 1.5, 0.05
    ref = exact_flow(x, t0, t1, lam, sd)
    out = {}
    for m in ("ddim", "dpm2", "dpmpp2"):
        errs = [np.abs(solve_pfode(x, TimeGrid.uniform(n, t0, t1), m, F, sd) - ref).max()
                for n in steps]
        out[m] = -float(np.polyfit(np.log(steps), np.log(errs), 1)[0])
    return out


def schedule_equivalence_errors(seed: int = 0) -> dict:
    """Flow-matching batches converted to TrigFlow vs native TrigFlow batches."""
    rng = np.random.default_rng(seed)
    sd = 1.0
    lam = np.array([2.0, 0.5])
    net, p = random_cm_net(rng, dim=2, sigma_d=sd)
    F = net.bind(p)
    sched = flow_matching_schedule()
    x0 = rng.normal(size=(64, 2)) * np.sqrt(lam)
    z = rng.normal(size=(64, 2)) * sd
    u = rng.uniform(0.02, 0.98, size=64)
    x_u = (1 - u)[:, None] * x0 + u[:, None] * z
    t_hat, x_hat = schedule_to_trigflow(sched, u, x_u)
    native = forward_process(x0, z, t_hat)
    loss_conv = diffusion_loss(F, x0, z, t_hat, sd)
    # the loss evaluated on the converted states, with v from the same (x0, z, t_hat)
    v = np.cos(t_hat)[:, None] * z - np.sin(t_hat)[:, None] * x0
    loss_from_states = float(np.mean(np.sum((sd * F(x_hat / sd, t_hat) - v) ** 2, axis=1)))
    # trajectories: integrate the analytic PF-ODE in TrigFlow from a converted start
    Fa = analytic_F(lam, sd)
    s0 = 0.9
    start_u = np.full(64, s0)
    xs_u = (1 - s0) * x0 + s0 * z
    ts, xs = schedule_to_trigflow(sched, start_u, xs_u)
    grid = TimeGrid.uniform(16, float(ts[0]), 0.05)
    traj_conv = solve_pfode(xs, grid, "dpm2", Fa, sd)
    traj_native = solve_pfode(forward_process(x0, z, ts), grid, "dpm2", Fa, sd)
    return {
        "state": rel_err(x_hat, native),
        "loss": rel_err(loss_from_states, loss_conv),
        "trajectory": rel_err(traj_conv, traj_native),
    }


def attention_errors(seed: int = 0, lengths=(1, 2, 7, 33, 64, 128), dv: int = 5) -> dict:
    rng = np.random.default_rng(seed)
    stream = 0.0
    for L in lengths:
        x, tx = rng.normal(size=(2, 3, L, L)) * 3
        v, tv = rng.normal(size=(2, 3, L, dv))
        yd, tyd = dense_attention_jvp_oracle(x, tx, v, tv)
        for b in sorted({1, 3, 16, 64, L}):
            y, ty = attention_jvp(x, tx, v, tv, block_size=b)
            stream = max(stream, np.abs(y - yd).max(), np.abs(ty - tyd).max())
    # dense oracle vs autodiff of the naive composition, on scores produced from Q K^T
    L, d = 16, 4
    q, k, v = rng.normal(size=(3, 2, L, d))
    tq, tk, tv = rng.normal(size=(3, 2, L, d))
    y, ty = ad.jvp_eval(lambda a: naive_attention(*a), (q, k, v), (tq, tk, tv))
    xs, txs = score_jvp(q, k, tq, tk)
    yo, tyo = dense_attention_jvp_oracle(xs, txs, v, tv)
    oracle = max(np.abs(y - yo).max(), np.abs(ty - tyo).max())
    return {"stream_vs_dense": float(stream), "dense_vs_autodiff": float(oracle)}
