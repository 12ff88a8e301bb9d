import math

import numpy as np
import pytest
from scipy import integrate, stats

from seiird.model import ODE_PARAMS, InitParams, RateParams, solve_with_sensitivities
from seiird.surveillance import (
    FloorCounter,
    ObservationParams,
    SurveillanceSeries,
    bb_log_pmf,
    beta_binomial_positivity_variance,
    case_log_pmf,
    case_log_pmf_grad,
    death_log_pmf,
    log_likelihood,
    log_likelihood_gradient,
    mean_positivity,
    nb_log_pmf,
    nb_log_pmf_grad,
    no_tests_case_log_pmf,
)
from seiird.simstudy import nb_draw


def nb_product_form(k, mu, phi):
    """log NB pmf via the finite product for Gamma(k+phi)/Gamma(phi)."""
    s = sum(math.log(phi + i) - math.log(i + 1) for i in range(k))
    return s + phi * math.log(phi / (phi + mu)) + k * math.log(mu / (phi + mu)) if k else phi * math.log(phi / (phi + mu))


def bb_by_quadrature(y, n, a, b):
    f = lambda p: stats.binom.pmf(y, n, p) * stats.beta.pdf(p, a, b)  # noqa: E731
    val, _ = integrate.quad(f, 0, 1, epsabs=0, epsrel=1e-13, limit=200)
    return math.log(val)


def _var_se(x):
    n = x.size
    c = x - x.mean()
    m2, m4 = np.mean(c**2), np.mean(c**4)
    return math.sqrt((m4 - m2**2) / n)


@pytest.mark.parametrize("k,mu,phi", [(0, 3.2, 0.7), (5, 3.2, 0.7), (17, 12.5, 6.9), (40, 0.8, 2.0), (3, 250.0, 1e4)])
def test_nb_matches_oracles(k, mu, phi):
    scipy_val = stats.nbinom.logpmf(k, phi, phi / (phi + mu))
    assert nb_log_pmf(k, mu, phi) == pytest.approx(nb_product_form(k, mu, phi), abs=1e-10)
    assert nb_log_pmf(k, mu, phi) == pytest.approx(scipy_val, abs=1e-10)


def test_nb_zero_mean():
    assert nb_log_pmf(0, 0.0, 2.0) == 0.0
    assert nb_log_pmf(3, 0.0, 2.0) == -math.inf


@pytest.mark.parametrize("y,n,a,b", [(0, 10, 2.0, 3.0), (4, 10, 2.0, 3.0), (7, 25, 0.6, 0.9), (30, 30, 5.0, 1.5)])
def test_bb_matches_oracles(y, n, a, b):
    assert bb_log_pmf(y, n, a, b) == pytest.approx(stats.betabinom.logpmf(y, n, a, b), abs=1e-10)
    assert bb_log_pmf(y, n, a, b) == pytest.approx(bb_by_quadrature(y, n, a, b), abs=1e-10)


def test_bb_normalises():
    n, a, b = 200, 3.3, 40.1
    assert np.exp(bb_log_pmf(np.arange(n + 1), n, a, b)).sum() == pytest.approx(1.0, abs=1e-12)


def test_nb_moments_monte_carlo():
    rng = np.random.default_rng(1)
    mu, phi = 14.0, 1 / 0.38**2
    x = nb_draw(rng, np.full(1_000_000, mu), phi).astype(float)
    assert abs(x.mean() - mu) < 3 * x.std() / math.sqrt(x.size)
    assert abs(x.var() - (mu + mu**2 / phi)) < 3 * _var_se(x)


def test_bb_positivity_variance_monte_carlo():
    rng = np.random.default_rng(2)
    T, mu, kappa = 500, 0.08, 1 / 0.037**2
    p = rng.beta(kappa * mu, kappa * (1 - mu), 1_000_000)
    frac = rng.binomial(T, p) / T
    assert abs(frac.mean() - mu) < 3 * frac.std() / math.sqrt(frac.size)
    assert abs(frac.var() - beta_binomial_positivity_variance(T, mu, kappa)) < 3 * _var_se(frac)


def test_nb_gradients_fd():
    k, mu, phi, h = 7, 4.3, 2.1, 1e-6
    d_mu, d_phi = nb_log_pmf_grad(k, mu, phi)
    assert d_mu == pytest.approx((nb_log_pmf(k, mu + h, phi) - nb_log_pmf(k, mu - h, phi)) / (2 * h), rel=1e-7)
    assert d_phi == pytest.approx((nb_log_pmf(k, mu, phi + h) - nb_log_pmf(k, mu, phi - h)) / (2 * h), rel=1e-7)


def test_case_gradients_fd():
    y, T, mu, kappa, h = 40, 900, 0.05, 300.0, 1e-7
    g_mu, g_kappa = case_log_pmf_grad(y, T, mu, kappa)
    assert g_mu == pytest.approx((case_log_pmf(y, T, mu + h, kappa) - case_log_pmf(y, T, mu - h, kappa)) / (2 * h), rel=1e-6)
    h = 1e-2
    assert g_kappa == pytest.approx((case_log_pmf(y, T, mu, kappa + h) - case_log_pmf(y, T, mu, kappa - h)) / (2 * h), rel=1e-6)


def test_zero_tests_gives_certain_zero_cases():
    assert case_log_pmf(0, 0, 0.1, 50.0) == pytest.approx(0.0, abs=1e-14)


def test_case_bounds_rejected():
    with pytest.raises(ValueError):
        case_log_pmf(5, 3, 0.1, 10.0)


def test_positivity_floor_counts():
    c = FloorCounter()
    mu = mean_positivity(np.array([0.0, 1e-3]), 3.0, 0.8, counter=c)
    assert c.count == 1
    assert np.all((mu > 0) & (mu < 1))


def test_death_increment_validation():
    obs = ObservationParams(0.8, 5.0, 4.0, 0.8, 500.0)
    with pytest.raises(ValueError):
        death_log_pmf(np.array([1]), np.array([-1e-6]), obs)
    with pytest.raises(ValueError):
        no_tests_case_log_pmf(np.array([1]), np.array([-1e-6]), 0.1, 2.0, 1e6)


def test_series_validation():
    with pytest.raises(ValueError, match="bin 1"):
        SurveillanceSeries(tests=[5, 5], cases=[1, 6], deaths=[0, 0])
    with pytest.raises(ValueError):
        SurveillanceSeries(tests=[5, -1], cases=[1, 0], deaths=[0, 0])


def test_joint_gradient_fd(truth, sim_data):
    grid = sim_data.bin_edges

    def ll(theta):
        init = InitParams(*theta[:3])
        p = RateParams.from_durations(*theta[3:8])
        traj = solve_with_sensitivities(init, p, grid)
        return traj, ObservationParams(*theta[8:13])

    traj, obs = ll(truth)
    grad = log_likelihood_gradient(sim_data, traj, obs)
    names = ODE_PARAMS + ("rho", "phi", "alpha0", "alpha1", "kappa")
    for j, name in enumerate(names):
        h = 1e-6 * abs(truth[j]) * (1e-3 if name == "S0" else 1.0)
        up, dn = truth.copy(), truth.copy()
        up[j] += h
        dn[j] -= h
        fd = (log_likelihood(sim_data, *ll(up)) - log_likelihood(sim_data, *ll(dn))) / (2 * h)
        assert grad[name] == pytest.approx(fd, rel=1e-4, abs=1e-6), name
