import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trigflow import autodiff as ad
from trigflow.core import (
    HALF_PI, DataStats, GenericSchedule, ProposalParams, TrigTime, cm_output, diffusion_loss,
    edm_schedule, edm_to_trigflow, flow_matching_schedule, forward_process, sample_t,
    schedule_to_trigflow, snr, snr_standard, tau_to_t, trigflow_schedule, trigflow_to_edm,
    trigflow_to_schedule, velocity_target,
)
from trigflow.harness.identities import random_cm_net

rng0 = np.random.default_rng(0)
X0, Z = rng0.normal(size=(2, 5, 3))


def test_forward_endpoints():
    np.testing.assert_array_equal(forward_process(X0, Z, np.zeros(5)), X0)
    np.testing.assert_allclose(forward_process(X0, Z, np.full(5, HALF_PI)), Z, atol=1e-15)


def test_velocity_endpoints():
    np.testing.assert_array_equal(velocity_target(X0, Z, np.zeros(5)), Z)
    np.testing.assert_allclose(velocity_target(X0, Z, np.full(5, HALF_PI)), -X0, atol=1e-15)


def test_shape_mismatch_raises():
    with pytest.raises(ValueError, match="shape"):
        forward_process(X0, Z[:, :2], np.zeros(5))


def test_velocity_is_time_derivative():
    t = rng0.uniform(0, HALF_PI, 5)
    _, dx = ad.jvp_eval(lambda tt: forward_process(X0, Z, tt), t, np.ones(5))
    np.testing.assert_allclose(dx, velocity_target(X0, Z, t), rtol=0, atol=1e-10)


def test_cm_boundary_condition_random_net():
    net, p = random_cm_net(np.random.default_rng(1), dim=3)
    F = net.bind(p)
    np.testing.assert_array_equal(cm_output(F, X0, np.zeros(5), 0.7), X0)


def test_cm_with_zero_F():
    t = np.linspace(0.1, 1.5, 5)
    f = cm_output(lambda u, tt: np.zeros_like(u), X0, t, 0.7)
    np.testing.assert_allclose(f, np.cos(t)[:, None] * X0, rtol=1e-15)


def test_diffusion_loss_oracles():
    t = np.linspace(0.1, 1.4, 5)
    sd = 0.5
    v = velocity_target(X0, Z, t)
    # F returns v / sigma_d exactly
    perfect = lambda u, tt: v / sd  # noqa: E731
    assert diffusion_loss(perfect, X0, Z, t, sd) == 0.0
    zero = lambda u, tt: np.zeros_like(u)  # noqa: E731
    np.testing.assert_allclose(diffusion_loss(zero, X0, Z, t, sd), (v ** 2).sum(1).mean())


def test_proposal_map():
    assert tau_to_t(math.log(0.5), 0.5) == pytest.approx(math.pi / 4, abs=1e-15)
    assert tau_to_t(-50.0, 0.5) < 1e-20
    assert HALF_PI - tau_to_t(50.0, 0.5) < 1e-20
    with pytest.raises(ValueError):
        ProposalParams(0.0, 0.0)


def test_sample_t_distribution():
    from scipy import stats

    sd = 0.5
    p = ProposalParams(-1.0, 1.4)
    t = sample_t(p, sd, np.random.default_rng(3), size=20000)
    assert np.all((t > 0) & (t < HALF_PI))
    tau = np.log(sd * np.tan(t))
    assert stats.kstest(tau, "norm", args=(p.p_mean, p.p_std)).pvalue > 0.01


def test_edm_conversion_examples():
    x = rng0.normal(size=(2, 3))
    t, xt = edm_to_trigflow(np.zeros(2), x, 0.5)
    assert np.all(t == 0) and np.array_equal(xt, x)
    t, xt = edm_to_trigflow(np.full(2, 0.5), x, 0.5)
    np.testing.assert_allclose(t, math.pi / 4)
    np.testing.assert_allclose(xt, x / math.sqrt(2), rtol=1e-15)
    with pytest.raises(ValueError):
        edm_to_trigflow(np.array([-1.0]), x[:1], 0.5)


@settings(max_examples=50, deadline=None)
@given(sigma=st.floats(1e-3, 1e3), sd=st.floats(0.1, 3.0))
def test_edm_round_trip(sigma, sd):
    x = np.array([[1.0, -2.0]])
    t, xt = edm_to_trigflow(np.array([sigma]), x, sd)
    s2, x2 = trigflow_to_edm(t, xt, sd)
    assert abs(s2[0] - sigma) <= 1e-12 * sigma
    np.testing.assert_allclose(x2, x, rtol=1e-12)


def test_flow_matching_midpoint():
    t, _ = schedule_to_trigflow(flow_matching_schedule(), np.array([0.5]), np.ones((1, 2)))
    assert t[0] == pytest.approx(math.pi / 4, abs=1e-15)


@pytest.mark.parametrize("sched", [flow_matching_schedule(), trigflow_schedule(), edm_schedule(0.5)])
def test_schedule_round_trip(sched):
    u = np.array([0.0, 0.1, 0.4, 0.7, 0.95])
    x = rng0.normal(size=(5, 2))
    th, xh = schedule_to_trigflow(sched, u, x)
    u2, x2 = trigflow_to_schedule(sched, th, xh)
    np.testing.assert_allclose(u2, u, atol=1e-12)
    np.testing.assert_allclose(x2, x, rtol=1e-12)


def test_schedule_inverse_by_root_finding():
    fm = flow_matching_schedule()
    bare = GenericSchedule("fm", fm.alpha, fm.sigma, 1.0)
    u = np.array([0.0, 0.2, 0.6, 0.9])
    x = rng0.normal(size=(4, 2))
    u2, x2 = trigflow_to_schedule(bare, *schedule_to_trigflow(bare, u, x))
    np.testing.assert_allclose(u2, u, atol=1e-12)
    np.testing.assert_allclose(x2, x, rtol=1e-12)


def test_schedule_alpha_nonpositive_rejected():
    fm = flow_matching_schedule()
    with pytest.raises(ValueError, match="alpha"):
        schedule_to_trigflow(fm, np.array([0.5, 1.0]), np.ones((2, 1)))


def test_snr():
    assert snr(math.pi / 4) == pytest.approx(1.0)
    s = snr(np.linspace(0.05, 1.5, 30))
    assert np.all(np.diff(s) < 0)
    with pytest.raises(ValueError):
        snr(0.0)


def test_snr_matches_converted_schedule():
    sd = 0.7
    u = np.linspace(0.05, 0.9, 7)
    fm = flow_matching_schedule()
    th, _ = schedule_to_trigflow(fm, u, np.ones((7, 1)))
    # sigma_d-scaled noise: data SNR alpha^2 sd^2 / (sigma sd)^2
    np.testing.assert_allclose(snr(th), snr_standard(fm.alpha(u), fm.sigma(u) * sd, sd), rtol=1e-12)


def test_marginal_variance_preserved():
    sd = 1.3
    rng = np.random.default_rng(4)
    x0 = rng.normal(0, sd, size=(40000, 1))
    z = rng.normal(0, sd, size=(40000, 1))
    for t in (0.3, 0.8, 1.4):
        v = forward_process(x0, z, np.full(40000, t)).var()
        assert abs(v / sd ** 2 - 1) < 0.05


def test_data_stats():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(50000, 2)) * [1.0, 3.0]
    ds = DataStats.from_data(x)
    assert ds.dim == 2
    assert ds.sigma_d == pytest.approx(math.sqrt(5.0), rel=0.02)
    with pytest.raises(ValueError):
        DataStats(0.0, 1)


def test_trig_time_domain():
    tt = TrigTime(0.3)
    assert tt.cos == math.cos(0.3) and tt.sin == math.sin(0.3)
    with pytest.raises(ValueError):
        TrigTime(2.0)
    assert math.isfinite(TrigTime(HALF_PI).tan)
