"""Convergence diagnostics: rank-normalised split-R-hat and effective sample size."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats


class DiagnosticsError(ValueError):
    pass


@dataclass
class Diagnostics:
    names: tuple[str, ...]
    rhat: np.ndarray
    ess_bulk: np.ndarray
    ess_tail: np.ndarray
    degenerate: np.ndarray  # True where a parameter has (near) zero variance

    def max_rhat(self) -> float:
        ok = ~self.degenerate
        return float(np.max(self.rhat[ok])) if ok.any() else float("nan")

    def as_rows(self) -> list[dict]:
        return [
            {
                "parameter": n,
                "rhat": float(r),
                "ess_bulk": float(eb),
                "ess_tail": float(et),
                "degenerate": bool(d),
            }
            for n, r, eb, et, d in zip(self.names, self.rhat, self.ess_bulk, self.ess_tail, self.degenerate)
        ]


def _split(x: np.ndarray) -> np.ndarray:
    """(chains, draws) -> (2*chains, draws//2), dropping a middle draw if odd."""
    n = x.shape[1] // 2
    return np.concatenate([x[:, :n], x[:, -n:]], axis=0)


def _rank_normalize(x: np.ndarray) -> np.ndarray:
    r = stats.rankdata(x, method="average").reshape(x.shape)
    return stats.norm.ppf((r - 0.375) / (x.size + 0.25))


def _rhat_basic(x: np.ndarray) -> float:
    m, n = x.shape
    means = x.mean(axis=1)
    w = x.var(axis=1, ddof=1).mean()
    b = n * means.var(ddof=1)
    var_plus = (n - 1) / n * w + b / n
    return float(np.sqrt(var_plus / w))


def _autocov(x: np.ndarray) -> np.ndarray:
    n = x.size
    size = 2 ** int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(x - x.mean(), size)
    ac = np.fft.irfft(f * np.conj(f), size)[:n]
    return ac / n


def _ess_basic(x: np.ndarray) -> float:
    """Multi-chain ESS with Geyer's initial positive sequence.

    Autocorrelations are summed in pairs and the sum is truncated at the
    first negative pair, then made monotone.
    """
    m, n = x.shape
    acov = np.array([_autocov(c) for c in x])
    chain_var = acov[:, 0] * n / (n - 1.0)
    w = chain_var.mean()
    var_plus = w * (n - 1.0) / n
    if m > 1:
        var_plus += x.mean(axis=1).var(ddof=1)
    rho = 1.0 - (w - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    pairs = []
    t = 0
    while t + 1 < n:
        s = rho[t] + rho[t + 1]
        if s < 0:
            break
        pairs.append(s)
        t += 2
    pairs = np.minimum.accumulate(np.array(pairs)) if pairs else np.array([1.0])
    tau = -1.0 + 2.0 * pairs.sum()
    tau = max(tau, 1.0 / np.log10(m * n))
    return float(m * n / tau)


def diagnostics(draws, min_draws: int = 100) -> Diagnostics:
    """Split-R-hat and ESS per parameter for ``PosteriorDraws``.

    R-hat is the larger of the rank-normalised bulk and folded (tail) values.
    """
    if draws.n_chains < 2:
        raise DiagnosticsError("diagnostics require at least 2 chains")
    arr = draws.by_chain()  # (chains, draws, dim)
    if arr.shape[1] < min_draws:
        raise DiagnosticsError(f"need at least {min_draws} retained draws per chain, got {arr.shape[1]}")
    dim = arr.shape[2]
    rhat = np.full(dim, np.nan)
    ess_bulk = np.full(dim, np.nan)
    ess_tail = np.full(dim, np.nan)
    degenerate = np.zeros(dim, dtype=bool)
    for j in range(dim):
        x = arr[:, :, j]
        if np.ptp(x) <= 1e-14 * max(1.0, np.abs(x).max()) or np.any(x.var(axis=1) == 0):
            degenerate[j] = True
            continue
        sx = _split(x)
        z_bulk = _rank_normalize(sx)
        folded = np.abs(sx - np.median(sx))
        z_tail = _rank_normalize(folded)
        rhat[j] = max(_rhat_basic(z_bulk), _rhat_basic(z_tail))
        ess_bulk[j] = _ess_basic(z_bulk)
        q05, q95 = np.quantile(sx, [0.05, 0.95])
        ess_tail[j] = min(_ess_basic((sx <= q05).astype(float) + 0.0), _ess_basic((sx <= q95).astype(float)))
    return Diagnostics(tuple(draws.names), rhat, ess_bulk, ess_tail, degenerate)
