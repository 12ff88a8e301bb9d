"""Observation models for deaths and cases, and the joint log-likelihood.

Deaths in a bin are negative binomial (mean/overdispersion form) around a
detected fraction of the latent deaths. Cases are beta-binomial given the
number of tests, with mean positivity linked to latent incidence on the
log-odds scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import betaln, digamma, expit, gammaln, logit

from .model import IDX, ODE_PARAMS, Trajectory

POSITIVITY_FLOOR = 1e-12


@dataclass
class FloorCounter:
    """Counts how often incidence hit the floor before the logit."""

    count: int = 0


FLOOR_EVENTS = FloorCounter()


@dataclass
class SurveillanceSeries:
    tests: np.ndarray
    cases: np.ndarray
    deaths: np.ndarray
    bin_width: float = 3.0 / 7.0  # weeks
    start_date: str | None = None

    def __post_init__(self):
        self.tests = np.asarray(self.tests, dtype=np.int64)
        self.cases = np.asarray(self.cases, dtype=np.int64)
        self.deaths = np.asarray(self.deaths, dtype=np.int64)
        if not (self.tests.shape == self.cases.shape == self.deaths.shape) or self.tests.ndim != 1:
            raise ValueError("tests, cases and deaths must be 1-d arrays of equal length")
        if np.any(self.tests < 0) or np.any(self.cases < 0) or np.any(self.deaths < 0):
            raise ValueError("counts must be non-negative")
        if np.any(self.cases > self.tests):
            bad = int(np.argmax(self.cases > self.tests))
            raise ValueError(f"bin {bad}: cases ({self.cases[bad]}) exceed tests ({self.tests[bad]})")

    @property
    def L(self) -> int:
        return int(self.tests.size)

    @property
    def bin_edges(self) -> np.ndarray:
        return np.arange(self.L + 1) * self.bin_width


@dataclass(frozen=True)
class ObservationParams:
    rho: float
    phi: float
    alpha0: float
    alpha1: float
    kappa: float
    pop_size: float = 3.18e6

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must lie in [0, 1], got {self.rho}")
        if not (self.phi > 0 and self.kappa > 0 and self.alpha0 > 0 and self.pop_size > 0):
            raise ValueError("phi, kappa, alpha0 and pop_size must be positive")
        if not 0.0 < self.alpha1 < 1.0:
            raise ValueError(f"alpha1 must lie in (0, 1), got {self.alpha1}")


# --------------------------------------------------------------------------
# negative binomial (NB2)


def nb_log_pmf(k, mu, phi):
    """Log-pmf of a negative binomial with mean ``mu`` and variance ``mu(1 + mu/phi)``.

    Broadcasts over its arguments. ``mu == 0`` gives 0 for ``k == 0`` and
    ``-inf`` otherwise.
    """
    k = np.asarray(k, dtype=float)
    mu = np.asarray(mu, dtype=float)
    phi = np.asarray(phi, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_total = np.log(phi + mu)
        out = (
            gammaln(k + phi)
            - gammaln(phi)
            - gammaln(k + 1.0)
            - phi * np.log1p(mu / phi)
            + np.where(k > 0, k * (np.log(mu) - log_total), 0.0)
        )
    out = np.where((mu == 0) & (k > 0), -np.inf, out)
    return out[()] if out.ndim == 0 else out


def nb_log_pmf_grad(k, mu, phi):
    """Partial derivatives of :func:`nb_log_pmf` with respect to ``mu`` and ``phi``."""
    k = np.asarray(k, dtype=float)
    mu = np.asarray(mu, dtype=float)
    phi = np.asarray(phi, dtype=float)
    total = phi + mu
    with np.errstate(divide="ignore", invalid="ignore"):
        d_mu = np.where(k > 0, k / mu, 0.0) - (k + phi) / total
    d_phi = digamma(k + phi) - digamma(phi) - np.log1p(mu / phi) + (mu - k) / total
    return d_mu, d_phi


def death_log_pmf(M, delta_N_IpD, obs: ObservationParams):
    delta_N_IpD = np.asarray(delta_N_IpD, dtype=float)
    if np.any(delta_N_IpD < 0):
        raise ValueError("negative death increment; cumulative deaths must be non-decreasing")
    mu = obs.rho * obs.pop_size * delta_N_IpD
    return nb_log_pmf(M, mu, obs.phi)


# --------------------------------------------------------------------------
# beta-binomial


def mean_positivity(delta_N_IeIp, alpha0, alpha1, floor=POSITIVITY_FLOOR, counter: FloorCounter | None = None):
    """Mean test positivity: ``logit(mu) = alpha0 + alpha1 * logit(incidence)``."""
    x = np.asarray(delta_N_IeIp, dtype=float)
    low = x < floor
    if np.any(low):
        (counter or FLOOR_EVENTS).count += int(np.count_nonzero(low))
        x = np.where(low, floor, x)
    out = expit(alpha0 + alpha1 * logit(x))
    return out[()] if out.ndim == 0 else out


def bb_log_pmf(y, n, a, b):
    """Beta-binomial log-pmf with shapes ``a, b`` for ``y`` successes out of ``n``."""
    y = np.asarray(y, dtype=float)
    n = np.asarray(n, dtype=float)
    out = gammaln(n + 1.0) - gammaln(y + 1.0) - gammaln(n - y + 1.0) + betaln(y + a, n - y + b) - betaln(a, b)
    return out[()] if np.ndim(out) == 0 else out


def case_log_pmf(Y, T, mu_C, kappa):
    Y = np.asarray(Y)
    T = np.asarray(T)
    if np.any(Y > T) or np.any(Y < 0):
        raise ValueError("case counts must satisfy 0 <= Y <= T")
    return bb_log_pmf(Y, T, kappa * mu_C, kappa * (1.0 - mu_C))


def case_log_pmf_grad(Y, T, mu_C, kappa):
    """Partial derivatives of :func:`case_log_pmf` with respect to ``mu_C`` and ``kappa``."""
    Y = np.asarray(Y, dtype=float)
    T = np.asarray(T, dtype=float)
    a = kappa * mu_C
    b = kappa * (1.0 - mu_C)
    common = digamma(kappa) - digamma(T + kappa)
    d_a = digamma(Y + a) - digamma(a) + common
    d_b = digamma(T - Y + b) - digamma(b) + common
    return kappa * (d_a - d_b), mu_C * d_a + (1.0 - mu_C) * d_b


def beta_binomial_positivity_variance(T, mu_C, kappa):
    """Variance of the positive fraction ``Y / T`` under the beta-binomial."""
    return mu_C * (1.0 - mu_C) / T * (1.0 + (T - 1.0) / (kappa + 1.0))


# --------------------------------------------------------------------------
# joint likelihood


def increments(traj: Trajectory, name: str, data: SurveillanceSeries) -> np.ndarray:
    idx = _bin_indices(traj, data)
    return np.diff(traj.values[idx, IDX[name]])


def _bin_indices(traj: Trajectory, data: SurveillanceSeries) -> np.ndarray:
    edges = data.bin_edges + traj.times[0]
    idx = np.searchsorted(traj.times, edges)
    if np.any(idx >= traj.times.size) or not np.allclose(traj.times[np.minimum(idx, traj.times.size - 1)], edges, atol=1e-9):
        raise ValueError("trajectory grid does not contain every bin endpoint")
    return idx


def log_likelihood_terms(data: SurveillanceSeries, traj: Trajectory, obs: ObservationParams):
    """Per-bin death and case log-probabilities."""
    d_death = np.maximum(increments(traj, "N_IpD", data), 0.0)
    d_inc = increments(traj, "N_IeIp", data)
    deaths = death_log_pmf(data.deaths, d_death, obs)
    mu_c = mean_positivity(d_inc, obs.alpha0, obs.alpha1)
    cases = case_log_pmf(data.cases, data.tests, mu_c, obs.kappa)
    return deaths, cases


def log_likelihood(data: SurveillanceSeries, traj: Trajectory, obs: ObservationParams) -> float:
    deaths, cases = log_likelihood_terms(data, traj, obs)
    return float(np.sum(deaths) + np.sum(cases))


OBS_PARAMS = ("rho", "phi", "alpha0", "alpha1", "kappa")
LIKELIHOOD_PARAMS = ODE_PARAMS + OBS_PARAMS


def log_likelihood_gradient(data: SurveillanceSeries, traj: Trajectory, obs: ObservationParams) -> dict[str, float]:
    """Exact gradient of :func:`log_likelihood` over all 13 parameters.

    ``traj`` must carry sensitivities with respect to every entry of
    ``ODE_PARAMS``.
    """
    if traj.sensitivities is None or set(traj.wrt) != set(ODE_PARAMS):
        raise ValueError("trajectory must carry sensitivities for all ODE parameters")
    idx = _bin_indices(traj, data)
    order = [traj.wrt.index(w) for w in ODE_PARAMS]
    sens = traj.sensitivities[idx][:, :, order]
    vals = traj.values[idx]
    grad_ode, grad_obs = _gradient_core(
        data, np.diff(vals, axis=0), np.diff(sens, axis=0), obs.rho, obs.phi, obs.alpha0, obs.alpha1, obs.kappa, obs.pop_size
    )
    return dict(zip(LIKELIHOOD_PARAMS, np.concatenate([grad_ode, grad_obs])))


def _gradient_core(data, d_vals, d_sens, rho, phi, alpha0, alpha1, kappa, pop):
    """Shared likelihood gradient given per-bin increments of values and sensitivities.

    ``d_vals`` is ``(L, 11)`` and ``d_sens`` is ``(L, 11, 8)``.
    """
    d_death = np.maximum(d_vals[:, IDX["N_IpD"]], 0.0)
    mu_d = rho * pop * d_death
    g_mu_d, g_phi = nb_log_pmf_grad(data.deaths, mu_d, phi)

    x = d_vals[:, IDX["N_IeIp"]]
    floored = x < POSITIVITY_FLOOR
    x = np.where(floored, POSITIVITY_FLOOR, x)
    lx = logit(x)
    mu_c = expit(alpha0 + alpha1 * lx)
    g_mu_c, g_kappa = case_log_pmf_grad(data.cases, data.tests, mu_c, kappa)
    g_lin = g_mu_c * mu_c * (1.0 - mu_c)
    g_x = np.where(floored, 0.0, g_lin * alpha1 / (x * (1.0 - x)))

    grad_ode = (g_mu_d * rho * pop) @ d_sens[:, IDX["N_IpD"], :] + g_x @ d_sens[:, IDX["N_IeIp"], :]
    grad_obs = np.array(
        [
            np.sum(g_mu_d * pop * d_death),
            np.sum(g_phi),
            np.sum(g_lin),
            np.sum(g_lin * lx),
            np.sum(g_kappa),
        ]
    )
    return grad_ode, grad_obs


# --------------------------------------------------------------------------
# comparison model that ignores test volume


def no_tests_case_log_pmf(Y, delta_N_IeIp, rho_c, phi_c, pop_size):
    """Negative binomial cases with mean ``rho_c * N * delta_N_IeIp``."""
    delta_N_IeIp = np.asarray(delta_N_IeIp, dtype=float)
    if np.any(delta_N_IeIp < 0):
        raise ValueError("negative incidence increment")
    return nb_log_pmf(Y, rho_c * pop_size * delta_N_IeIp, phi_c)


def _no_tests_gradient_core(data, d_vals, d_sens, rho, phi, rho_c, phi_c, pop):
    d_death = np.maximum(d_vals[:, IDX["N_IpD"]], 0.0)
    g_mu_d, g_phi = nb_log_pmf_grad(data.deaths, rho * pop * d_death, phi)
    d_inc = np.maximum(d_vals[:, IDX["N_IeIp"]], 0.0)
    g_mu_c, g_phi_c = nb_log_pmf_grad(data.cases, rho_c * pop * d_inc, phi_c)
    grad_ode = (g_mu_d * rho * pop) @ d_sens[:, IDX["N_IpD"], :] + (g_mu_c * rho_c * pop) @ d_sens[:, IDX["N_IeIp"], :]
    grad_obs = np.array(
        [
            np.sum(g_mu_d * pop * d_death),
            np.sum(g_phi),
            np.sum(g_mu_c * pop * d_inc),
            np.sum(g_phi_c),
        ]
    )
    return grad_ode, grad_obs
