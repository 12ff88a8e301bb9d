import logging

import numpy as np
import pytest

from seiird.analysis import (
    SummaryTable,
    bayes_factor_Re_gt_1,
    effective_R,
    forecast,
    horizon_bins,
    interval_coverage,
    latent_summaries,
    odds_ratio_bayes_factor,
    percent_change_Re,
    prior_draws,
    trajectories,
    underreporting_factor,
)
from seiird.model import IDX, integrate_theta
from seiird.priors import PriorSpec


@pytest.fixture(scope="module")
def draws():
    return prior_draws(PriorSpec.default(), 300, seed=1)


def test_summary_table_nested_and_exact():
    x = np.random.default_rng(0).normal(size=(4000, 3))
    t = SummaryTable.from_samples(x, labels=["a", "b", "c"])
    assert t.nested()
    assert np.allclose(t.median, np.median(x, axis=0))
    assert np.allclose(t.upper[0.95], np.quantile(x, 0.975, axis=0))
    assert t.header() == ["median", "lower50", "upper50", "lower80", "upper80", "lower95", "upper95"]
    assert [lab for lab, _ in t.rows()] == ["a", "b", "c"]


def test_effective_R(draws, truth):
    assert np.array_equal(effective_R(draws, 0.0), draws["S0"] * draws["R0"])
    t = 2.0
    S = integrate_theta(draws.params[0, :8], np.array([0.0, t]))[-1, 0, IDX["S"]]
    assert effective_R(draws, t)[0] == pytest.approx(S * draws["R0"][0], rel=1e-14)
    with pytest.raises(ValueError):
        effective_R(draws, -1.0)
    with pytest.raises(ValueError):
        effective_R(draws, 5.0, t_max=4.0)


def test_odds_ratio_bayes_factor():
    bf = odds_ratio_bayes_factor(0.75, 1000, 0.5)
    assert bf.value == pytest.approx(3.0)
    assert odds_ratio_bayes_factor(1.0, 1000, 0.5).bound == "lower"
    assert odds_ratio_bayes_factor(0.0, 1000, 0.5).bound == "upper"
    assert str(odds_ratio_bayes_factor(1.0, 1000, 0.5)).startswith("BF >")
    with pytest.raises(ValueError, match="more prior samples"):
        odds_ratio_bayes_factor(0.5, 1000, 0.0)


def test_bayes_factor_against_itself_is_one(draws):
    bf = bayes_factor_Re_gt_1(draws, draws, 1.0)
    assert abs(np.log(bf.value)) < 1e-12


def test_small_prior_sample_warns(draws, caplog):
    with caplog.at_level(logging.WARNING):
        bayes_factor_Re_gt_1(draws, PriorSpec.default(), 0.0, n_prior=2000)
    assert "prior probability" in caplog.text


def test_percent_change():
    a = np.array([1.0, 2.0])
    b = np.array([1.5, 1.0])
    assert np.allclose(percent_change_Re(a, b, pairing="identity"), [50.0, -50.0])
    out = percent_change_Re(np.full(10, 2.0), np.full(7, 1.0))
    assert out.shape == (7,) and np.all(out == -50.0)
    with pytest.raises(ValueError):
        percent_change_Re(a, b, pairing="sorted")
    with pytest.raises(ValueError):
        percent_change_Re(np.array([]), b)


def test_underreporting(draws):
    f = underreporting_factor(draws, 1000.0, 1.0, 3.18e6)
    n_se = trajectories(draws, [1.0])[:, -1, IDX["N_SE"]]
    assert np.allclose(f, 3.18e6 * n_se / 1000.0)
    with pytest.raises(ValueError):
        underreporting_factor(draws, 0.0, 1.0, 3.18e6)


def test_latent_summaries(draws):
    out = latent_summaries(draws, 4, 3 / 7, 3.18e6)
    assert set(out) == {"cumulative_deaths", "cumulative_incidence", "prevalence"}
    assert all(t.nested() for t in out.values())
    assert np.all(np.diff(out["cumulative_incidence"].median) >= 0)
    assert out["cumulative_deaths"].median[0] == 0


def test_forecast_shapes_and_determinism(draws):
    a = forecast(draws, 12, 9, seed=3)
    b = forecast(draws, 12, 9, seed=3)
    assert a.deaths.shape == (300, 21) and a.horizon == 9
    assert np.array_equal(a.deaths, b.deaths) and np.array_equal(a.positivity, b.positivity)
    assert a.cases is None
    assert np.all((a.positivity >= 0) & (a.positivity <= 1))
    assert set(a.summaries()) == {"deaths", "positivity"}


def test_forecast_cases_with_future_tests(draws):
    f = forecast(draws, 12, 3, future_tests=[0, 100, 5000], seed=1)
    assert np.all(f.cases[:, 0] == 0)
    assert np.all(f.cases[:, 2] <= 5000)
    with pytest.raises(ValueError):
        forecast(draws, 12, 3, future_tests=[1, 2])


def test_forecast_horizon_checks(draws, caplog):
    with pytest.raises(ValueError):
        forecast(draws, 12, 0)
    with caplog.at_level(logging.WARNING):
        forecast(prior_draws(PriorSpec.default(), 5), 2, horizon_bins(30, 3 / 7))
    assert "unreliable" in caplog.text
    assert horizon_bins(4, 3 / 7) == 9


def test_forecast_death_moments_match_model(truth):
    from seiird.sampler import PosteriorDraws
    from seiird.priors import PARAM_NAMES

    n = 20000
    params = np.tile(truth, (n, 1))
    z = np.zeros(n)
    d = PosteriorDraws(PARAM_NAMES, params, z.astype(int), z, z.astype(bool), z.astype(int), z)
    f = forecast(d, 4, 1, seed=0)
    inc = np.diff(integrate_theta(truth[:8], np.arange(6) * 3 / 7)[:, 0, IDX["N_IpD"]])
    mu = truth[8] * 3.18e6 * inc
    var = mu + mu**2 / truth[9]
    se = np.sqrt(var / n)
    assert np.all(np.abs(f.deaths.mean(axis=0) - mu) < 4 * se)


def test_interval_coverage():
    pred = np.random.default_rng(0).normal(size=(10000, 2))
    assert interval_coverage(pred, np.array([0.0, 5.0])).tolist() == [True, False]
