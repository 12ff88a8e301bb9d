import numpy as np
import pytest

from seiird.diagnostics import DiagnosticsError, diagnostics
from seiird.sampler import PosteriorDraws


def _draws(chains):
    chains = np.asarray(chains, dtype=float)  # (m, n, d)
    m, n, d = chains.shape
    params = chains.reshape(m * n, d)
    z = np.zeros(m * n)
    return PosteriorDraws(tuple(f"x{i}" for i in range(d)), params, np.repeat(np.arange(m), n), z, z.astype(bool), z.astype(int), z)


def test_iid_chains():
    x = np.random.default_rng(0).normal(size=(4, 1000, 2))
    d = diagnostics(_draws(x))
    assert d.max_rhat() < 1.01
    assert np.all(d.ess_bulk > 3000)


def test_offset_chains_flagged():
    x = np.random.default_rng(1).normal(size=(4, 500, 1))
    x[0] += 2.0
    assert diagnostics(_draws(x)).max_rhat() > 1.05


def test_ar1_ess():
    rng = np.random.default_rng(2)
    rho, n = 0.8, 20000
    x = np.empty((2, n))
    for c in range(2):
        e = rng.normal(size=n)
        x[c, 0] = e[0]
        for t in range(1, n):
            x[c, t] = rho * x[c, t - 1] + e[t]
    expected = 2 * n * (1 - rho) / (1 + rho)
    ess = diagnostics(_draws(x[:, :, None])).ess_bulk[0]
    assert ess == pytest.approx(expected, rel=0.15)


def test_degenerate_parameter():
    x = np.random.default_rng(3).normal(size=(2, 200, 2))
    x[:, :, 1] = 0.5
    d = diagnostics(_draws(x))
    assert d.degenerate.tolist() == [False, True]
    assert np.isfinite(d.max_rhat())
    assert d.as_rows()[1]["degenerate"] is True


def test_requirements():
    x = np.random.default_rng(4).normal(size=(1, 500, 1))
    with pytest.raises(DiagnosticsError, match="2 chains"):
        diagnostics(_draws(x))
    with pytest.raises(DiagnosticsError, match="100"):
        diagnostics(_draws(np.zeros((2, 50, 1)) + np.arange(50)[None, :, None]))
