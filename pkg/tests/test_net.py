import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trigflow import autodiff as ad
from trigflow.core import HALF_PI, cm_output
from trigflow.harness.identities import random_cm_net, rel_err
from trigflow.net import (
    Net, NetConfig, TimeEmbedConfig, ada_double_norm, c_noise, layer_norm, pixel_norm,
    pos_time_embed,
)


def test_c_noise_identity():
    assert c_noise(0.0) == 0.0
    assert c_noise(math.pi / 4) == math.pi / 4


def test_c_noise_legacy():
    np.testing.assert_allclose(c_noise(np.array(math.pi / 4), "legacy", 0.5), math.log(0.5))
    with pytest.raises(ValueError):
        c_noise(0.1, "edm")


def test_embedding_at_zero():
    e = pos_time_embed(np.zeros(3), TimeEmbedConfig())
    assert e.shape == (3, 64)
    assert np.all(e[:, :32] == 0.0) and np.all(e[:, 32:] == 1.0)


def test_embedding_frequencies():
    cfg = TimeEmbedConfig()
    f = cfg.freqs
    assert np.all(np.diff(f) > 0)
    assert f[-1] == pytest.approx(2 * math.pi * 0.02)
    with pytest.raises(ValueError):
        TimeEmbedConfig(embed_dim=7)


@pytest.mark.parametrize("t", [0.0, 0.4, 1.5])
def test_fourier_scale_derivative_ratio(t):
    # |d emb / dt| = |freqs| for every t, so the ratio is the scale ratio
    lo, hi = TimeEmbedConfig(scale=0.02), TimeEmbedConfig(scale=16.0)
    _, d_lo = ad.jvp_eval(lambda x: pos_time_embed(x, lo), np.array([t]), np.ones(1))
    _, d_hi = ad.jvp_eval(lambda x: pos_time_embed(x, hi), np.array([t]), np.ones(1))
    assert np.linalg.norm(d_hi) / np.linalg.norm(d_lo) == pytest.approx(800.0, rel=1e-12)


def test_pixel_norm_of_ones():
    np.testing.assert_allclose(pixel_norm(np.ones(4)), np.ones(4), rtol=1e-8)


def test_pixel_norm_of_zero():
    assert np.all(pixel_norm(np.zeros((2, 5))) == 0.0)


@settings(max_examples=50, deadline=None)
@given(v=st.lists(st.floats(-100, 100), min_size=2, max_size=16), k=st.floats(0.1, 10))
def test_pixel_norm_properties(v, k):
    v = np.array(v)
    # eps matters once the rms approaches sqrt(eps)
    if np.mean(v * v) * min(k, 1.0) ** 2 < 1e-2:
        return
    y = pixel_norm(v)
    # unit rms and scale invariance (up to eps)
    assert abs(np.sqrt(np.mean(y * y)) - 1) < 1e-6
    np.testing.assert_allclose(pixel_norm(k * v), y, atol=1e-5)


def test_layer_norm_moments():
    x = np.random.default_rng(0).normal(3, 5, size=(4, 32))
    y = layer_norm(x)
    np.testing.assert_allclose(y.mean(-1), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(-1), 1, rtol=1e-6)


def test_ada_double_norm_zero_scale():
    rng = np.random.default_rng(1)
    x, cond = rng.normal(size=(3, 6)), rng.normal(size=(3, 4))
    p = {"n.Ws": np.zeros((4, 6)), "n.bs": np.zeros(6),
         "n.Wb": rng.normal(size=(4, 6)), "n.bb": rng.normal(size=6)}
    y = ada_double_norm(x, cond, p, "n")
    np.testing.assert_allclose(y, pixel_norm(cond @ p["n.Wb"] + p["n.bb"]), rtol=1e-14)


def test_ada_double_norm_width_check():
    p = {"n.Ws": np.zeros((4, 5)), "n.bs": np.zeros(5), "n.Wb": np.zeros((4, 5)), "n.bb": np.zeros(5)}
    with pytest.raises(ValueError, match="width"):
        ada_double_norm(np.ones((2, 6)), np.ones((2, 4)), p, "n")


@pytest.mark.parametrize("attention", [False, True])
def test_zero_output_layer(attention):
    cfg = NetConfig(dim=8, hidden=16, depth=2, cond_dim=8, attention=attention, tokens=4)
    net = Net(cfg)
    p = net.init(np.random.default_rng(0))
    u = np.random.default_rng(1).normal(size=(5, 8))
    t = np.linspace(0.1, 1.5, 5)
    F = net.apply(p, u, t)
    assert np.all(F == 0.0)
    np.testing.assert_allclose(cm_output(net.bind(p), u, t, 1.0), np.cos(t)[:, None] * u)


def test_scalar_time_broadcast():
    net, p = random_cm_net(np.random.default_rng(2))
    u = np.ones((3, 3))
    np.testing.assert_array_equal(net.apply(p, u, 0.5), net.apply(p, u, np.full(3, 0.5)))


@pytest.mark.parametrize("attention", [False, True])
def test_batch_permutation_equivariance(attention):
    rng = np.random.default_rng(3)
    net, p = random_cm_net(rng, attention=attention)
    d = net.cfg.dim
    u, t = rng.normal(size=(6, d)), rng.uniform(0, HALF_PI, 6)
    perm = rng.permutation(6)
    np.testing.assert_allclose(net.apply(p, u[perm], t[perm]), net.apply(p, u, t)[perm], rtol=1e-13)


@pytest.mark.parametrize("attention", [False, True])
def test_jvp_vs_finite_differences(attention):
    rng = np.random.default_rng(4)
    net, p = random_cm_net(rng, attention=attention)
    d = net.cfg.dim
    u, v = rng.normal(size=(2, 4, d))
    t = rng.uniform(0.1, 1.4, 4)
    f = lambda a: net.apply(p, a[0], a[1])  # noqa: E731
    _, dy = ad.jvp_eval(f, (u, t), (v, np.ones(4)))
    eps = 1e-5
    fd = (f((u + eps * v, t + eps)) - f((u - eps * v, t - eps))) / (2 * eps)
    assert rel_err(dy, fd) < 1e-5


def test_parameter_gradients_vs_finite_differences():
    rng = np.random.default_rng(5)
    net, p = random_cm_net(rng, attention=True)
    u, t = rng.normal(size=(3, 8)), rng.uniform(0.1, 1.4, 3)
    y = rng.normal(size=(3, 8))
    loss = lambda q: ad.sum(net.apply(q, u, t) * y)  # noqa: E731
    _, g = ad.grad_eval(loss, p)
    for k in ("attn.q", "l0.W", "temb1.b", "out.W"):
        dv = rng.normal(size=p[k].shape)
        hi = float(loss({**p, k: p[k] + 1e-5 * dv}))
        lo = float(loss({**p, k: p[k] - 1e-5 * dv}))
        assert rel_err((g[k] * dv).sum(), (hi - lo) / 2e-5) < 1e-6


def test_time_derivative_bounded_vs_legacy():
    rng = np.random.default_rng(6)
    u = rng.normal(size=(1, 3))
    ts = HALF_PI - np.logspace(-1, -6, 6)
    out = {}
    for mode in ("trig", "legacy"):
        cfg = NetConfig(dim=3, hidden=16, depth=2, cond_dim=16, c_noise=mode)
        net = Net(cfg)
        p = net.init(np.random.default_rng(7))
        p["out.W"] = rng.normal(size=p["out.W"].shape)
        norms = []
        for t in ts:
            _, dF = ad.jvp_eval(lambda tt: net.apply(p, u, tt), np.array([t]), np.ones(1))
            norms.append(np.linalg.norm(dF))
        out[mode] = np.array(norms)
    assert np.all(np.isfinite(out["trig"])) and out["trig"].max() < 10
    # legacy derivative grows roughly like 1 / cos(t)
    assert out["legacy"][-1] > 1e3 * out["legacy"][0]


def test_config_validation():
    with pytest.raises(ValueError):
        NetConfig(dim=0)
    with pytest.raises(ValueError):
        NetConfig(dim=6, attention=True, tokens=4)
    with pytest.raises(ValueError):
        NetConfig(dim=3, c_noise="other")
