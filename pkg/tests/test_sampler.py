import math

import numpy as np
import pytest
from scipy import stats

from seiird.diagnostics import diagnostics
from seiird.sampler import (
    NUTS,
    DualAveraging,
    SamplerConfig,
    SamplerError,
    WelfordCovariance,
    WelfordVariance,
    sample,
    warmup_windows,
)


class Gaussian:
    """Zero-mean Gaussian with covariance ``cov``; picklable for worker pools."""

    def __init__(self, cov):
        self.cov = np.atleast_2d(cov)
        self.prec = np.linalg.inv(self.cov)

    def __call__(self, z):
        g = -self.prec @ z
        return 0.5 * float(z @ g), g


class Broken:
    def __call__(self, z):
        return -math.inf, np.zeros_like(z)


def _run(target, dim, cfg, seed=0, workers=1):
    rng = np.random.default_rng(seed)
    inits = [rng.normal(size=dim) for _ in range(cfg.n_chains)]
    return sample(target, cfg, inits, workers=workers)


def test_seed_determinism():
    cfg = SamplerConfig(2, 600, 300, seed=3)
    a = _run(Gaussian(np.eye(3)), 3, cfg)
    b = _run(Gaussian(np.eye(3)), 3, cfg)
    assert np.array_equal(a.params, b.params)
    c = _run(Gaussian(np.eye(3)), 3, SamplerConfig(2, 600, 300, seed=4))
    assert not np.array_equal(a.params, c.params)


def test_worker_count_does_not_change_output():
    cfg = SamplerConfig(2, 400, 200, seed=5)
    serial = _run(Gaussian(np.eye(2)), 2, cfg, workers=1)
    pooled = _run(Gaussian(np.eye(2)), 2, cfg, workers=2)
    assert np.array_equal(serial.params, pooled.params)
    assert np.array_equal(serial.tree_depth, pooled.tree_depth)


def test_depth_zero_stays_at_initial_point():
    cfg = SamplerConfig(1, 300, 100, max_tree_depth=0)
    d = _run(Gaussian(np.eye(2)), 2, cfg)
    start = np.random.default_rng(0).normal(size=2)
    assert np.all(d.tree_depth == 0)
    assert np.all(d.params == start)


@pytest.mark.parametrize("metric", ["diag", "dense"])
def test_correlated_gaussian(metric):
    cov = np.array([[1.0, 0.95], [0.95, 1.0]])
    d = _run(Gaussian(cov), 2, SamplerConfig(4, 8000, 4000, seed=2, metric=metric))
    assert np.all(np.abs(d.params.mean(axis=0)) < 0.05)
    assert np.allclose(np.cov(d.params.T), cov, atol=0.1)
    assert diagnostics(d).max_rhat() < 1.01


def test_energy_error_small_at_high_target():
    d = _run(Gaussian(np.diag([1.0, 4.0, 0.25])), 3, SamplerConfig(2, 2000, 1000, target_accept=0.9, seed=8))
    assert np.mean(np.abs(d.energy_error)) < 0.2
    assert d.divergent.sum() == 0
    assert 0.8 < np.mean(d.accept_stat) < 0.98


def test_dual_averaging_converges_to_target():
    da = DualAveraging(1.0, 0.8)
    eps = 1.0
    for _ in range(2000):
        accept = math.exp(-eps)  # acceptance falls with step size
        eps = da.update(accept)
    assert da.final_step_size == pytest.approx(-math.log(0.8), rel=0.05)


def test_warmup_windows_partition():
    init, term, ends = warmup_windows(1000)
    assert init == 150 and ends[-1] == 1000 - term
    widths = np.diff([init] + ends)
    assert np.all(widths[1:-1] == 2 * widths[:-2]) or len(widths) <= 2


def test_welford_estimators():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5000, 3)) * [1.0, 2.0, 3.0]
    v, c = WelfordVariance(3), WelfordCovariance(3)
    for row in x:
        v.add(row)
        c.add(row)
    assert np.allclose(v.regularized(), np.var(x, axis=0, ddof=1), rtol=0.01)
    assert np.allclose(np.diag(c.regularized()), v.regularized(), rtol=1e-6)


def test_dense_metric_momentum_covariance():
    nuts = NUTS(Gaussian(np.eye(2)), 2, np.random.default_rng(1))
    inv = np.array([[2.0, 0.5], [0.5, 1.0]])
    nuts.set_inv_metric(inv)
    p = np.array([nuts.sample_momentum() for _ in range(40000)])
    assert np.allclose(np.cov(p.T), np.linalg.inv(inv), atol=0.03)
    assert np.allclose(nuts.velocity(np.array([1.0, 0.0])), inv[:, 0])


def test_config_validation():
    for bad in (dict(n_chains=0), dict(n_draws=100, n_warmup=100), dict(target_accept=1.0), dict(max_tree_depth=-1), dict(metric="full")):
        with pytest.raises(ValueError):
            SamplerConfig(**bad)
    with pytest.raises(ValueError):
        sample(Gaussian(np.eye(1)), SamplerConfig(2, 100, 50), [np.zeros(1)])


def test_non_finite_start_raises():
    with pytest.raises(SamplerError, match="initial point"):
        sample(Broken(), SamplerConfig(1, 100, 50), [np.zeros(2)])


def test_standard_gaussian_ks():
    d = _run(Gaussian(np.eye(4)), 4, SamplerConfig(2, 4000, 2000, seed=6))
    for j in range(4):
        assert stats.kstest(d.params[::2, j], "norm").pvalue > 0.01
