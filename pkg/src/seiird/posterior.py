"""Log posterior density and gradient on the unconstrained scale."""

from __future__ import annotations

import math

import numpy as np
from scipy.special import expit, logit

from .kernels import MODEL_CODES, log_density_grad, prior_tables
from .model import DELTA, IDX, MAX_STEP, ODE_PARAMS, IntegrationError, integrate_theta
from .priors import (
    NO_TESTS_PARAM_NAMES,
    PARAM_NAMES,
    PriorSpec,
    from_unconstrained,
    log_prior,
    log_prior_grad,
    UNIT_PARAMS,
    transform_jacobian,
)
from .surveillance import (
    POSITIVITY_FLOOR,
    FloorCounter,
    SurveillanceSeries,
    _gradient_core,
    _no_tests_gradient_core,
    bb_log_pmf,
    nb_log_pmf,
)

MODELS = ("test_aware", "no_tests")
N_ODE = len(ODE_PARAMS)


class Posterior:
    """Posterior for one surveillance series under one observation model.

    ``model`` is ``"test_aware"`` (beta-binomial cases given tests) or
    ``"no_tests"`` (negative binomial cases ignoring test volume).
    Instances hold no mutable state other than the floor counter, so a
    single instance may be evaluated from several workers.
    """

    def __init__(
        self,
        data: SurveillanceSeries,
        model: str = "test_aware",
        priors: PriorSpec | None = None,
        pop_size: float = 3.18e6,
        delta: float = DELTA,
        max_step: float = MAX_STEP,
    ):
        if model not in MODELS:
            raise ValueError(f"unknown model {model!r}; choose from {MODELS}")
        self.data = data
        self.model = model
        self.names = PARAM_NAMES if model == "test_aware" else NO_TESTS_PARAM_NAMES
        self.priors = priors if priors is not None else PriorSpec.default(model)
        if self.priors.names != self.names:
            raise ValueError(f"prior spec parameters {self.priors.names} do not match model {model}")
        self.pop_size = float(pop_size)
        self.delta = float(delta)
        self.max_step = float(max_step)
        self.edges = data.bin_edges
        self.floor_events = FloorCounter()
        self._codes, self._pparams, self._pconst = prior_tables(self.priors)
        self._unit = np.array([n in UNIT_PARAMS for n in self.names])
        self._counts = (data.deaths.copy(), data.cases.copy(), data.tests.copy())

    @property
    def dim(self) -> int:
        return len(self.names)

    # -- constrained scale ------------------------------------------------

    def log_likelihood(self, theta) -> float:
        theta = np.asarray(theta, dtype=float)
        raw = integrate_theta(theta[:N_ODE], self.edges, self.delta, max_step=self.max_step)
        d_vals = np.diff(raw[:, 0, :], axis=0)
        return self._log_lik_from_increments(theta, d_vals)

    def _log_lik_from_increments(self, theta, d_vals) -> float:
        data = self.data
        d_death = np.maximum(d_vals[:, IDX["N_IpD"]], 0.0)
        d_inc = d_vals[:, IDX["N_IeIp"]]
        rho, phi = theta[8], theta[9]
        deaths = nb_log_pmf(data.deaths, rho * self.pop_size * d_death, phi)
        if self.model == "test_aware":
            alpha0, alpha1, kappa = theta[10], theta[11], theta[12]
            low = d_inc < POSITIVITY_FLOOR
            if np.any(low):
                self.floor_events.count += int(np.count_nonzero(low))
                d_inc = np.where(low, POSITIVITY_FLOOR, d_inc)
            mu_c = expit(alpha0 + alpha1 * logit(d_inc))
            cases = bb_log_pmf(data.cases, data.tests, kappa * mu_c, kappa * (1.0 - mu_c))
        else:
            rho_c, phi_c = theta[10], theta[11]
            cases = nb_log_pmf(data.cases, rho_c * self.pop_size * np.maximum(d_inc, 0.0), phi_c)
        return float(np.sum(deaths) + np.sum(cases))

    def log_prob(self, theta) -> float:
        """Unnormalised log posterior on the constrained scale (no Jacobian)."""
        lp = log_prior(theta, self.priors)
        if lp == -math.inf:
            return lp
        try:
            ll = self.log_likelihood(theta)
        except IntegrationError:
            return -math.inf
        return lp + ll if math.isfinite(ll) else -math.inf

    def log_prob_and_grad(self, theta) -> tuple[float, np.ndarray]:
        theta = np.asarray(theta, dtype=float)
        lp = log_prior(theta, self.priors)
        if lp == -math.inf:
            return lp, np.zeros(self.dim)
        try:
            raw = integrate_theta(theta[:N_ODE], self.edges, self.delta, with_sens=True, max_step=self.max_step)
        except IntegrationError:
            return -math.inf, np.zeros(self.dim)
        d_vals = np.diff(raw[:, 0, :], axis=0)
        d_sens = np.transpose(np.diff(raw[:, 1:, :], axis=0), (0, 2, 1))
        ll = self._log_lik_from_increments(theta, d_vals)
        if not math.isfinite(ll):
            return -math.inf, np.zeros(self.dim)
        if self.model == "test_aware":
            g_ode, g_obs = _gradient_core(self.data, d_vals, d_sens, *theta[8:13], self.pop_size)
        else:
            g_ode, g_obs = _no_tests_gradient_core(self.data, d_vals, d_sens, *theta[8:12], self.pop_size)
        grad = np.concatenate([g_ode, g_obs]) + log_prior_grad(theta, self.priors)
        return lp + ll, grad

    # -- unconstrained scale ----------------------------------------------

    def constrain(self, z) -> np.ndarray:
        return from_unconstrained(z, self.names)[0]

    def log_density(self, z) -> float:
        with np.errstate(over="ignore", invalid="ignore"):
            theta, log_jac = from_unconstrained(z, self.names)
        if not np.all(np.isfinite(theta)):
            return -math.inf
        return self.log_prob(theta) + log_jac

    def log_density_and_grad(self, z) -> tuple[float, np.ndarray]:
        """Compiled evaluation; returns ``(-inf, zeros)`` at invalid points."""
        deaths, cases, tests = self._counts
        lp, grad, floors = log_density_grad(
            np.asarray(z, dtype=float), MODEL_CODES[self.model], self._unit, self._codes, self._pparams,
            self._pconst, deaths, cases, tests, self.edges, self.pop_size, self.delta, self.max_step, POSITIVITY_FLOOR,
        )
        if floors:
            self.floor_events.count += int(floors)
        return float(lp), grad

    def reference_log_density_and_grad(self, z) -> tuple[float, np.ndarray]:
        """NumPy evaluation of :meth:`log_density_and_grad`, kept as its cross-check."""
        with np.errstate(over="ignore", invalid="ignore"):
            theta, log_jac = from_unconstrained(z, self.names)
        if not np.all(np.isfinite(theta)):
            return -math.inf, np.zeros(self.dim)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            lp, g = self.log_prob_and_grad(theta)
        if not math.isfinite(lp) or not np.all(np.isfinite(g)):
            return -math.inf, np.zeros(self.dim)
        dtheta, dlogjac = transform_jacobian(theta, self.names)
        return lp + log_jac, g * dtheta + dlogjac

    __call__ = log_density_and_grad
