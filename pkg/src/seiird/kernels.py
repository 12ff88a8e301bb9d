"""Compiled log posterior and gradient on the unconstrained scale.

This fuses the transforms, priors, ODE sensitivities and both observation
models into one numba call. The pure NumPy path in :mod:`seiird.posterior`
computes the same quantities and serves as its reference in the tests.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit
from scipy import special

from .model import _integrate

FAMILY_CODES = {"beta": 0, "lognormal": 1, "truncnormal": 2, "exp_inv_sqrt": 3, "flat": 4}
MODEL_CODES = {"test_aware": 0, "no_tests": 1}


def prior_tables(spec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Family codes, hyperparameters and normalising constants per parameter."""
    codes = np.empty(len(spec.names), dtype=np.int64)
    params = np.zeros((len(spec.names), 2))
    const = np.zeros(len(spec.names))
    half_log_2pi = 0.5 * math.log(2.0 * math.pi)
    for i, name in enumerate(spec.names):
        prior = spec[name]
        codes[i] = FAMILY_CODES[prior.family]
        params[i, : len(prior.params)] = prior.params
        p = prior.params
        if prior.family == "beta":
            const[i] = -special.betaln(p[0], p[1])
        elif prior.family == "lognormal":
            const[i] = -math.log(p[1]) - half_log_2pi
        elif prior.family == "truncnormal":
            const[i] = -math.log(p[1]) - half_log_2pi - special.log_ndtr(p[0] / p[1])
        elif prior.family == "exp_inv_sqrt":
            const[i] = math.log(p[0]) + math.log(0.5)
    return codes, params, const


@njit(cache=True, error_model="numpy")
def _digamma(x):
    if not x > 0.0:
        return math.nan
    r = 0.0
    while x < 6.0:
        r -= 1.0 / x
        x += 1.0
    f = 1.0 / (x * x)
    t = f * (-1.0 / 12 + f * (1.0 / 120 + f * (-1.0 / 252 + f * (1.0 / 240 + f * (-1.0 / 132)))))
    return r + math.log(x) - 0.5 / x + t


@njit(cache=True, error_model="numpy")
def _betaln(a, b):
    return math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b)


@njit(cache=True, error_model="numpy")
def _nb(k, mu, phi):
    """NB2 log-pmf and its partials in ``mu`` and ``phi``."""
    total = phi + mu
    lp = math.lgamma(k + phi) - math.lgamma(phi) - math.lgamma(k + 1.0) - phi * math.log1p(mu / phi)
    d_mu = -(k + phi) / total
    if k > 0:
        if mu <= 0.0:
            return -math.inf, 0.0, 0.0
        lp += k * (math.log(mu) - math.log(total))
        d_mu += k / mu
    d_phi = _digamma(k + phi) - _digamma(phi) - math.log1p(mu / phi) + (mu - k) / total
    return lp, d_mu, d_phi


@njit(cache=True, error_model="numpy")
def _prior(code, p0, p1, const, x):
    """Log prior density and derivative at ``x``."""
    if code == 0:
        if not (0.0 < x < 1.0):
            return -math.inf, 0.0
        return const + (p0 - 1.0) * math.log(x) + (p1 - 1.0) * math.log1p(-x), (p0 - 1.0) / x - (p1 - 1.0) / (1.0 - x)
    if code == 4:
        return 0.0, 0.0
    if not x > 0.0:
        return -math.inf, 0.0
    if code == 1:
        lx = math.log(x)
        u = (lx - p0) / p1
        return const - lx - 0.5 * u * u, -(1.0 + u / p1) / x
    if code == 2:
        u = (x - p0) / p1
        return const - 0.5 * u * u, -u / p1
    lx = math.log(x)
    return const - p0 / math.sqrt(x) - 1.5 * lx, 0.5 * p0 * x**-1.5 - 1.5 / x


@njit(cache=True, error_model="numpy")
def _ode_inputs(theta, delta):
    S0, I0, Ie0, R0, g, a, b, eta = theta[0], theta[1], theta[2], theta[3], theta[4], theta[5], theta[6], theta[7]
    inf = 1.0 - S0
    denom = a + delta * b
    rates = np.array([R0 / denom, 1.0 / g, 1.0 / a, 1.0 / b, eta, delta])
    y0 = np.zeros((9, 4))
    y0[0, 0] = S0
    y0[0, 1] = (1.0 - I0) * inf
    y0[0, 2] = Ie0 * I0 * inf
    y0[0, 3] = (1.0 - Ie0) * I0 * inf
    y0[1, 0] = 1.0
    y0[1, 1] = -(1.0 - I0)
    y0[1, 2] = -Ie0 * I0
    y0[1, 3] = -(1.0 - Ie0) * I0
    y0[2, 1] = -inf
    y0[2, 2] = Ie0 * inf
    y0[2, 3] = (1.0 - Ie0) * inf
    y0[3, 2] = I0 * inf
    y0[3, 3] = -I0 * inf
    drates = np.zeros((5, 8))
    drates[0, 3] = 1.0 / denom
    drates[0, 5] = -R0 / denom**2
    drates[0, 6] = -R0 * delta / denom**2
    drates[1, 4] = -1.0 / g**2
    drates[2, 5] = -1.0 / a**2
    drates[3, 6] = -1.0 / b**2
    drates[4, 7] = 1.0
    return y0, rates, drates


@njit(cache=True, error_model="numpy")
def log_density_grad(z, model, unit, codes, pparams, pconst, deaths, cases, tests, edges, pop, delta, max_step, floor):
    """Returns ``(log density, gradient, floor events)``; ``-inf`` marks an invalid point."""
    dim = z.shape[0]
    grad = np.zeros(dim)
    theta = np.empty(dim)
    dtheta = np.empty(dim)
    dlogjac = np.empty(dim)
    lp = 0.0
    for i in range(dim):
        zi = z[i]
        if unit[i]:
            if zi >= 0:
                e = math.exp(-zi)
                t = 1.0 / (1.0 + e)
            else:
                e = math.exp(zi)
                t = e / (1.0 + e)
            theta[i] = t
            dtheta[i] = t * (1.0 - t)
            dlogjac[i] = 1.0 - 2.0 * t
            lp += -(max(zi, 0.0) + math.log1p(math.exp(-abs(zi)))) - (max(-zi, 0.0) + math.log1p(math.exp(-abs(zi))))
        else:
            t = math.exp(zi)
            theta[i] = t
            dtheta[i] = t
            dlogjac[i] = 1.0
            lp += zi
        if not math.isfinite(theta[i]):
            return -math.inf, grad, 0
        v, d = _prior(codes[i], pparams[i, 0], pparams[i, 1], pconst[i], theta[i])
        if v == -math.inf:
            return -math.inf, grad, 0
        lp += v
        grad[i] = d

    y0, rates, drates = _ode_inputs(theta, delta)
    traj = _integrate(y0, rates, drates, edges, max_step)
    rho, phi = theta[8], theta[9]
    floors = 0
    for ell in range(deaths.shape[0]):
        d_death = traj[ell + 1, 0, 10] - traj[ell, 0, 10]
        if d_death < 0.0:
            d_death = 0.0
        v, g_mu, g_phi = _nb(float(deaths[ell]), rho * pop * d_death, phi)
        if v == -math.inf:
            return -math.inf, grad, floors
        lp += v
        c = g_mu * rho * pop
        for j in range(8):
            grad[j] += c * (traj[ell + 1, 1 + j, 10] - traj[ell, 1 + j, 10])
        grad[8] += g_mu * pop * d_death
        grad[9] += g_phi

        x = traj[ell + 1, 0, 8] - traj[ell, 0, 8]
        if model == 0:
            alpha0, alpha1, kappa = theta[10], theta[11], theta[12]
            floored = x < floor
            if floored:
                x = floor
                floors += 1
            lx = math.log(x) - math.log1p(-x)
            s = alpha0 + alpha1 * lx
            if s >= 0:
                mu_c = 1.0 / (1.0 + math.exp(-s))
            else:
                mu_c = math.exp(s) / (1.0 + math.exp(s))
            a = kappa * mu_c
            b = kappa * (1.0 - mu_c)
            y = float(cases[ell])
            n = float(tests[ell])
            lp += (
                math.lgamma(n + 1.0) - math.lgamma(y + 1.0) - math.lgamma(n - y + 1.0)
                + _betaln(y + a, n - y + b) - _betaln(a, b)
            )
            common = _digamma(kappa) - _digamma(n + kappa)
            d_a = _digamma(y + a) - _digamma(a) + common
            d_b = _digamma(n - y + b) - _digamma(b) + common
            g_lin = kappa * (d_a - d_b) * mu_c * (1.0 - mu_c)
            grad[10] += g_lin
            grad[11] += g_lin * lx
            grad[12] += mu_c * d_a + (1.0 - mu_c) * d_b
            if not floored:
                g_x = g_lin * alpha1 / (x * (1.0 - x))
                for j in range(8):
                    grad[j] += g_x * (traj[ell + 1, 1 + j, 8] - traj[ell, 1 + j, 8])
        else:
            rho_c, phi_c = theta[10], theta[11]
            if x < 0.0:
                x = 0.0
            v, g_mu, g_phi = _nb(float(cases[ell]), rho_c * pop * x, phi_c)
            if v == -math.inf:
                return -math.inf, grad, floors
            lp += v
            c = g_mu * rho_c * pop
            for j in range(8):
                grad[j] += c * (traj[ell + 1, 1 + j, 8] - traj[ell, 1 + j, 8])
            grad[10] += g_mu * pop * x
            grad[11] += g_phi

    for i in range(dim):
        grad[i] = grad[i] * dtheta[i] + dlogjac[i]
        if not math.isfinite(grad[i]):
            return -math.inf, np.zeros(dim), floors
    if not math.isfinite(lp):
        return -math.inf, np.zeros(dim), floors
    return lp, grad, floors

