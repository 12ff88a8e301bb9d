"""Posterior summaries, derived quantities, Bayes factors and forecasts."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logit

from .model import DELTA, IDX, ODE_PARAMS, integrate_many
from .priors import PriorSpec
from .sampler import PosteriorDraws

log = logging.getLogger(__name__)

LEVELS = (0.5, 0.8, 0.95)
MAX_STABLE_HORIZON_WEEKS = 26.0


@dataclass
class SummaryTable:
    """Pointwise posterior median and central 50/80/95% intervals."""

    labels: list
    median: np.ndarray
    lower: dict  # level -> array
    upper: dict

    @classmethod
    def from_samples(cls, samples: np.ndarray, labels=None) -> "SummaryTable":
        """``samples`` is ``(n_draws, n_rows)``."""
        samples = np.atleast_2d(samples)
        probs = [0.5] + [q for lv in LEVELS for q in ((1 - lv) / 2, (1 + lv) / 2)]
        qs = np.quantile(samples, probs, axis=0)
        lower = {lv: qs[1 + 2 * i] for i, lv in enumerate(LEVELS)}
        upper = {lv: qs[2 + 2 * i] for i, lv in enumerate(LEVELS)}
        labels = list(range(samples.shape[1])) if labels is None else list(labels)
        return cls(labels, qs[0], lower, upper)

    def nested(self) -> bool:
        ok = np.all(self.lower[0.95] <= self.lower[0.8]) and np.all(self.lower[0.8] <= self.lower[0.5])
        ok = ok and np.all(self.lower[0.5] <= self.median) and np.all(self.median <= self.upper[0.5])
        ok = ok and np.all(self.upper[0.5] <= self.upper[0.8]) and np.all(self.upper[0.8] <= self.upper[0.95])
        return bool(ok)

    def header(self) -> list[str]:
        cols = ["median"]
        for lv in LEVELS:
            pct = int(round(lv * 100))
            cols += [f"lower{pct}", f"upper{pct}"]
        return cols

    def rows(self):
        for i, lab in enumerate(self.labels):
            row = [self.median[i]]
            for lv in LEVELS:
                row += [self.lower[lv][i], self.upper[lv][i]]
            yield lab, row


# --------------------------------------------------------------------------
# trajectories and derived quantities


def ode_columns(draws: PosteriorDraws) -> np.ndarray:
    return draws.params[:, [draws.names.index(n) for n in ODE_PARAMS]]


def trajectories(draws: PosteriorDraws, times, delta: float = DELTA) -> np.ndarray:
    """Per-draw solutions, ``(n_draws, n_times, 11)``; ``times[0]`` must be 0."""
    times = np.asarray(times, dtype=float)
    if times[0] != 0.0:
        times = np.concatenate([[0.0], times])
        return integrate_many(ode_columns(draws), times, delta)[:, 1:, :]
    return integrate_many(ode_columns(draws), times, delta)


def _check_time(t, t_max):
    t = float(t)
    if t < 0 or (t_max is not None and t > t_max + 1e-12):
        raise ValueError(f"time {t} outside the solved range [0, {t_max}]")
    return t


def effective_R(draws: PosteriorDraws, t: float, delta: float = DELTA, t_max: float | None = None) -> np.ndarray:
    """``R_e(t) = S(t) * R0`` per draw."""
    t = _check_time(t, t_max)
    S = trajectories(draws, [t], delta)[:, -1, IDX["S"]] if t > 0 else draws["S0"]
    return S * draws["R0"]


@dataclass
class BayesFactor:
    value: float
    posterior_prob: float
    prior_prob: float
    bound: str | None = None  # "lower" or "upper" when the posterior fraction is 0 or 1

    def __str__(self):
        if self.bound == "lower":
            return f"BF > {self.value:.3g}"
        if self.bound == "upper":
            return f"BF < {self.value:.3g}"
        return f"BF = {self.value:.3g}"


def odds_ratio_bayes_factor(q: float, n_post: int, p0: float) -> BayesFactor:
    """Posterior odds over prior odds of a one-sided hypothesis.

    A posterior fraction of exactly 0 or 1 is replaced by ``1/n`` or
    ``1 - 1/n`` and the result is reported as a bound.
    """
    if not 0.0 < p0 < 1.0:
        raise ValueError(f"prior probability {p0} must lie strictly inside (0, 1); draw more prior samples")
    bound = None
    q_eff = q
    if q <= 0.0:
        q_eff, bound = 1.0 / n_post, "upper"
    elif q >= 1.0:
        q_eff, bound = 1.0 - 1.0 / n_post, "lower"
    value = (q_eff / (1.0 - q_eff)) / (p0 / (1.0 - p0))
    return BayesFactor(value, q, p0, bound)


def prior_draws(spec: PriorSpec, n: int, seed: int = 0) -> PosteriorDraws:
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 99])))
    params = spec.sample(rng, n)
    z = np.zeros(n)
    return PosteriorDraws(spec.names, params, np.zeros(n, dtype=int), z, z.astype(bool), z.astype(int), z)


def bayes_factor_Re_gt_1(
    draws: PosteriorDraws,
    prior_spec: PriorSpec | PosteriorDraws,
    t: float,
    n_prior: int = 100_000,
    seed: int = 0,
    delta: float = DELTA,
) -> BayesFactor:
    """Bayes factor for ``R_e(t) > 1`` against ``R_e(t) <= 1``.

    ``prior_spec`` may also be a set of draws standing in for the prior.
    """
    q = float(np.mean(effective_R(draws, t, delta) > 1.0))
    if isinstance(prior_spec, PosteriorDraws):
        reference = prior_spec
    else:
        if n_prior < 100_000:
            log.warning("prior probability from only %d draws", n_prior)
        reference = prior_draws(prior_spec, n_prior, seed)
    p0 = float(np.mean(effective_R(reference, t, delta) > 1.0))
    return odds_ratio_bayes_factor(q, len(draws), p0)


def underreporting_factor(draws: PosteriorDraws, observed_cumulative_cases: float, t: float, pop_size: float, delta: float = DELTA):
    """Latent cumulative infections over observed cumulative cases, per draw."""
    if observed_cumulative_cases <= 0:
        raise ValueError("observed cumulative cases must be positive")
    t = _check_time(t, None)
    n_se = trajectories(draws, [t], delta)[:, -1, IDX["N_SE"]] if t > 0 else np.zeros(len(draws))
    return pop_size * n_se / observed_cumulative_cases


def percent_change_Re(re_a: np.ndarray, re_b: np.ndarray, seed: int = 0, pairing: str = "random") -> np.ndarray:
    """``100 * (R_e^b - R_e^a) / R_e^a`` over paired draws.

    Periods are fitted separately, so draws are paired by independent random
    permutation (``pairing="random"``) or in the given order (``"identity"``).
    """
    re_a = np.asarray(re_a, dtype=float)
    re_b = np.asarray(re_b, dtype=float)
    if re_a.size == 0 or re_b.size == 0:
        raise ValueError("both draw sets must be non-empty")
    n = min(re_a.size, re_b.size)
    if pairing == "random":
        rng = np.random.default_rng(seed)
        a = re_a[rng.permutation(re_a.size)[:n]]
        b = re_b[rng.permutation(re_b.size)[:n]]
    elif pairing == "identity":
        a, b = re_a[:n], re_b[:n]
    else:
        raise ValueError(f"unknown pairing {pairing!r}")
    return 100.0 * (b - a) / a


def latent_summaries(draws: PosteriorDraws, n_bins: int, bin_width: float, pop_size: float, delta: float = DELTA) -> dict[str, SummaryTable]:
    """Summaries of cumulative deaths, cumulative incidence and prevalence on the bin grid.

    Prevalence counts infectious individuals only (``Ie + Ip``).
    """
    times = np.arange(n_bins + 1) * bin_width
    traj = trajectories(draws, times, delta)
    quantities = {
        "cumulative_deaths": pop_size * traj[:, :, IDX["N_IpD"]],
        "cumulative_incidence": pop_size * traj[:, :, IDX["N_SE"]],
        "prevalence": pop_size * (traj[:, :, IDX["Ie"]] + traj[:, :, IDX["Ip"]]),
    }
    return {k: SummaryTable.from_samples(v, labels=times) for k, v in quantities.items()}


# --------------------------------------------------------------------------
# posterior predictive


@dataclass
class Forecast:
    """Predictive draws per bin; bins ``0..n_train-1`` are in-sample."""

    n_train: int
    bin_width: float
    deaths: np.ndarray  # (n_draws, n_bins) int
    positivity: np.ndarray | None  # (n_draws, n_bins) in [0, 1]
    cases: np.ndarray | None = None

    @property
    def n_bins(self) -> int:
        return self.deaths.shape[1]

    @property
    def horizon(self) -> int:
        return self.n_bins - self.n_train

    def summaries(self) -> dict[str, SummaryTable]:
        labels = np.arange(self.n_bins)
        out = {"deaths": SummaryTable.from_samples(self.deaths, labels)}
        if self.positivity is not None:
            out["positivity"] = SummaryTable.from_samples(self.positivity, labels)
        if self.cases is not None:
            out["cases"] = SummaryTable.from_samples(self.cases, labels)
        return out


def horizon_bins(weeks: float, bin_width: float) -> int:
    return int(round(weeks / bin_width))


def forecast(
    draws: PosteriorDraws,
    n_train: int,
    horizon: int,
    bin_width: float = 3.0 / 7.0,
    pop_size: float = 3.18e6,
    delta: float = DELTA,
    future_tests=None,
    seed: int = 0,
) -> Forecast:
    """Posterior predictive draws over the training bins plus ``horizon`` bins.

    Deaths are negative binomial around detected latent deaths. Positivity is
    drawn from its beta distribution and needs no test counts; reported cases
    are drawn only when ``future_tests`` (one count per forecast bin) is given.
    """
    if horizon < 1:
        raise ValueError("forecast horizon must be at least one bin")
    if horizon * bin_width > MAX_STABLE_HORIZON_WEEKS:
        log.warning("forecast horizon %.1f weeks exceeds %g weeks; long extrapolations are unreliable", horizon * bin_width, MAX_STABLE_HORIZON_WEEKS)
    n_bins = n_train + horizon
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 4242])))
    times = np.arange(n_bins + 1) * bin_width
    inc = np.diff(trajectories(draws, times, delta), axis=1)
    rho = draws["rho"][:, None]
    phi = draws["phi"][:, None]
    mu_d = rho * pop_size * np.maximum(inc[:, :, IDX["N_IpD"]], 0.0)
    lam = rng.gamma(np.broadcast_to(phi, mu_d.shape), 1.0) * (mu_d / phi)
    deaths = rng.poisson(lam).astype(np.int64)

    positivity = cases = None
    if "kappa" in draws.names:
        kappa = draws["kappa"][:, None]
        x = np.clip(inc[:, :, IDX["N_IeIp"]], 1e-12, None)
        mu_c = expit(draws["alpha0"][:, None] + draws["alpha1"][:, None] * logit(x))
        positivity = rng.beta(kappa * mu_c, kappa * (1.0 - mu_c))
        if future_tests is not None:
            ft = np.asarray(future_tests, dtype=np.int64)
            if ft.size != horizon:
                raise ValueError(f"need {horizon} future test counts, got {ft.size}")
            cases = rng.binomial(ft[None, :], positivity[:, n_train:])
    return Forecast(n_train, bin_width, deaths, positivity, cases)


def interval_coverage(pred: np.ndarray, observed: np.ndarray, level: float = 0.95) -> np.ndarray:
    """Whether each observed value lies in the central predictive interval."""
    lo, hi = np.quantile(pred, [(1 - level) / 2, (1 + level) / 2], axis=0)
    observed = np.asarray(observed)
    return (observed >= lo) & (observed <= hi)


__all__ = [
    "SummaryTable",
    "Forecast",
    "BayesFactor",
    "effective_R",
    "bayes_factor_Re_gt_1",
    "underreporting_factor",
    "percent_change_Re",
    "latent_summaries",
    "forecast",
    "interval_coverage",
]
