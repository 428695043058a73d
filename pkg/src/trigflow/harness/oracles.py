"""Closed forms for zero-mean Gaussian data with diagonal covariance.

With data variances ``lam`` and noise ``z ~ N(0, sigma_d^2 I)`` the pair
``(x_t, v_t)`` is jointly Gaussian per coordinate, with
``Var(x_t) = c^2 lam + s^2 sigma_d^2`` and ``Cov(v_t, x_t) = c s (sigma_d^2 - lam)``.
"""
from __future__ import annotations

import numpy as np


def _diag(data_cov, dim=None):
    cov = np.asarray(data_cov, dtype=np.float64)
    if cov.ndim == 2:
        if np.any(cov - np.diag(np.diag(cov))):
            raise ValueError("only diagonal data covariances are supported")
        cov = np.diag(cov)
    if cov.ndim == 0 and dim is not None:
        cov = np.full(dim, float(cov))
    return cov


def _col(t, x):
    t = np.asarray(t, dtype=np.float64)
    return t.reshape(t.shape + (1,) * (x.ndim - t.ndim)) if t.ndim else t


def marginal_std(t, lam, sigma_d):
    c, s = np.cos(t), np.sin(t)
    return np.sqrt(c * c * lam + s * s * sigma_d ** 2)


def analytic_gaussian_velocity(x_t, t, data_cov, sigma_d):
    """``E[v_t | x_t]`` for zero-mean Gaussian data."""
    x_t = np.asarray(x_t, dtype=np.float64)
    lam = _diag(data_cov, x_t.shape[-1])
    tc = _col(t, x_t)
    c, s = np.cos(tc), np.sin(tc)
    return c * s * (sigma_d ** 2 - lam) / (c * c * lam + s * s * sigma_d ** 2) * x_t


def analytic_F(data_cov, sigma_d):
    """Optimal network ``F*(u, t) = E[v_t | x_t = sigma_d u] / sigma_d``."""
    return lambda u, t: analytic_gaussian_velocity(sigma_d * np.asarray(u), t, data_cov, sigma_d) / sigma_d


def posterior_mean(x_t, t, data_cov, sigma_d):
    """``E[x0 | x_t]``, which is also ``cm_output`` evaluated with ``F*``."""
    x_t = np.asarray(x_t, dtype=np.float64)
    lam = _diag(data_cov, x_t.shape[-1])
    tc = _col(t, x_t)
    c, s = np.cos(tc), np.sin(tc)
    return c * lam / (c * c * lam + s * s * sigma_d ** 2) * x_t


def exact_flow(x_s, s, t, data_cov, sigma_d):
    """Exact PF-ODE transport from time ``s`` to ``t`` (coordinatewise scaling)."""
    x_s = np.asarray(x_s, dtype=np.float64)
    lam = _diag(data_cov, x_s.shape[-1])
    return marginal_std(_col(t, x_s), lam, sigma_d) / marginal_std(_col(s, x_s), lam, sigma_d) * x_s


def perfect_cm(data_cov, sigma_d):
    """Consistency function ``f*(x, t)`` mapping each trajectory to its ``t = 0`` end."""
    def f(x, t):
        x = np.asarray(x, dtype=np.float64)
        lam = _diag(data_cov, x.shape[-1])
        return np.sqrt(lam) / marginal_std(_col(t, x), lam, sigma_d) * x
    return f


def perfect_cm_F(data_cov, sigma_d):
    """Network output reproducing :func:`perfect_cm` through ``cos x - sin sigma_d F``."""
    def F(u, t):
        u = np.asarray(u, dtype=np.float64)
        x = sigma_d * u
        lam = _diag(data_cov, x.shape[-1])
        tc = _col(t, x)
        c, s = np.cos(tc), np.sin(tc)
        target = np.sqrt(lam) / marginal_std(tc, lam, sigma_d) * x
        return (c * x - target) / (np.maximum(s, 1e-300) * sigma_d)
    return F
