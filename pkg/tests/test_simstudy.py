import dataclasses
import json

import numpy as np
import pytest
from scipy import stats
from scipy.special import expit, logit

from seiird.model import IDX
from seiird.priors import TABLE_A1
from seiird.sampler import SamplerConfig
from seiird.simstudy import (
    SimStudyConfig,
    StudyResult,
    default_test_schedule,
    fit_dataset,
    latent_increments,
    parameter_metrics,
    run_study,
    simulate_dataset,
)
from seiird.surveillance import death_log_pmf, ObservationParams, no_tests_case_log_pmf

TINY = SamplerConfig(n_chains=2, n_draws=440, n_warmup=200, target_accept=0.9)


def test_large_overdispersion_limits_concentrate_at_means(truth):
    theta = truth.copy()
    theta[9] = theta[12] = 1e12
    tests = default_test_schedule()
    d = latent_increments(theta, tests.size)
    mu_cases = tests * expit(theta[10] + theta[11] * logit(d[:, IDX["N_IeIp"]]))
    mu_deaths = theta[8] * 3.18e6 * d[:, IDX["N_IpD"]]
    reps = [simulate_dataset(theta, tests, seed=s) for s in range(10_000)]
    cases = np.mean([r.cases for r in reps], axis=0)
    deaths = np.mean([r.deaths for r in reps], axis=0)
    assert np.all(np.abs(cases / mu_cases - 1) < 0.02)
    assert np.all(np.abs(deaths / mu_deaths - 1) < 0.02)


def test_zero_tests_give_zero_cases(truth):
    s = simulate_dataset(truth, np.zeros(12, dtype=int), seed=1)
    assert np.all(s.cases == 0)


def test_seed_determinism(truth):
    a, b = simulate_dataset(truth, seed=9), simulate_dataset(truth, seed=9)
    assert np.array_equal(a.cases, b.cases) and np.array_equal(a.deaths, b.deaths)
    assert not np.array_equal(a.cases, simulate_dataset(truth, seed=10).cases)


def test_test_schedule_shape():
    t = default_test_schedule()
    assert t.size == 12 and np.all(np.diff(t) > 0)
    assert 1500 < t[0] < 3000 and 8000 < t[-1] < 9500


def test_no_tests_pmf_reuses_death_structure_and_matches_oracle():
    y, inc, rho_c, phi_c, pop = 57, 1.6e-4, 0.11, 2.1, 3.18e6
    obs = ObservationParams(rho_c, phi_c, 1.0, 0.5, 1.0, pop)
    assert no_tests_case_log_pmf(y, inc, rho_c, phi_c, pop) == death_log_pmf(y, inc, obs)
    mu = rho_c * pop * inc
    assert no_tests_case_log_pmf(y, inc, rho_c, phi_c, pop) == pytest.approx(stats.nbinom.logpmf(y, phi_c, phi_c / (phi_c + mu)), abs=1e-10)
    assert no_tests_case_log_pmf(0, 0.0, rho_c, phi_c, pop) == 0.0


@pytest.mark.parametrize("c", [0.01, 7.5])
def test_metrics_scale_invariant(c):
    x = np.random.default_rng(0).lognormal(size=4000)
    a = parameter_metrics(x, 1.3)[:3]
    b = parameter_metrics(c * x, c * 1.3)[:3]
    assert a[0] == pytest.approx(b[0], rel=1e-10) and a[1] == pytest.approx(b[1], rel=1e-10) and a[2] == b[2]


def test_config_validation():
    with pytest.raises(ValueError):
        SimStudyConfig(n_datasets=0)
    with pytest.raises(ValueError):
        SimStudyConfig(tests=np.ones(5, dtype=int))
    with pytest.raises(ValueError):
        SimStudyConfig(models=("poisson",))
    with pytest.raises(ValueError):
        SimStudyConfig(truth=np.r_[1.5, TABLE_A1.as_array()[1:]])


def test_fit_hash_ignores_dataset_count():
    assert SimStudyConfig(n_datasets=3).fit_hash() == SimStudyConfig(n_datasets=100).fit_hash()
    assert SimStudyConfig(seed=2).fit_hash() != SimStudyConfig(seed=1).fit_hash()


@pytest.fixture(scope="module")
def one_dataset_study(tmp_path_factory):
    cfg = SimStudyConfig(n_datasets=1, sampler=TINY, holdout_bins=3)
    cache = str(tmp_path_factory.mktemp("cache"))
    return cfg, cache, run_study(cfg, workers=1, cache_dir=cache)


def test_single_dataset_tables(one_dataset_study):
    cfg, _, res = one_dataset_study
    table = res.metric_table()
    r0 = [r for r in table if r["parameter"] == "R0"]
    assert len(r0) == 2 and all(r["n_fits"] == 1 for r in r0)
    assert all(r["coverage_pct"] in (0.0, 100.0) for r in table)
    assert {r["parameter"] for r in table if r["model"] == "no_tests"} >= {"R0", "inv_sqrt_phi"}
    assert "inv_sqrt_kappa" in {r["parameter"] for r in table if r["model"] == "test_aware"}
    assert 0.0 <= res.holdout_coverage() <= 1.0


def test_study_reproducible_and_cached(one_dataset_study, monkeypatch):
    cfg, cache, res = one_dataset_study
    again = fit_dataset(cfg, 0)
    assert json.dumps(again, sort_keys=True) == json.dumps(res.rows, sort_keys=True)

    def boom(*a, **k):
        raise AssertionError("cache was not used")

    monkeypatch.setattr("seiird.simstudy.fit_dataset", boom)
    cached = run_study(cfg, workers=1, cache_dir=cache)
    assert cached.metric_table() == res.metric_table()


def test_failed_fits_are_counted(monkeypatch):
    from seiird.sampler import SamplerError

    def fail(*a, **k):
        raise SamplerError("forced")

    monkeypatch.setattr("seiird.fit.fit", fail)
    cfg = SimStudyConfig(n_datasets=1, sampler=TINY)
    res = run_study(cfg, workers=1)
    assert res.failures() == {"test_aware": 1, "no_tests": 1}
    assert res.metric_table() == []
    assert isinstance(res, StudyResult)


@pytest.mark.slow
def test_huge_information_limit_recovers_R0():
    cfg = SimStudyConfig(
        n_datasets=1,
        tests=default_test_schedule() * 100,
        pop_size=3.18e8,
        models=("test_aware",),
        holdout_bins=0,
        sampler=dataclasses.replace(TINY, n_draws=800, n_warmup=400),
    )
    res = run_study(cfg, workers=1)
    assert res.median_rel_abs_diff("test_aware", "R0") < 0.05
