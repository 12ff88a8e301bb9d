"""Simulation study: synthetic data, the no-tests comparison model and metrics."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logit

from .model import DELTA, IDX, ODE_PARAMS, integrate_theta
from .priors import NO_TESTS_PARAM_NAMES, PARAM_NAMES, TABLE_A1, ParamVector
from .sampler import SamplerConfig, SamplerError
from .surveillance import SurveillanceSeries, no_tests_case_log_pmf  # noqa: F401

log = logging.getLogger(__name__)

BIN_WIDTH = 3.0 / 7.0
N_BINS = 12  # 36 days


def default_test_schedule(n_bins: int = N_BINS, scale: float = 1.0) -> np.ndarray:
    """Tests per 3-day bin: a sigmoid rise from about 2000 to about 9000.

    Stands in for the April 14 to May 19 Orange County test counts, which
    rose steeply over the window. Bins past the first 36 days stay on the
    plateau.
    """
    ell = np.arange(n_bins)
    t = 2000.0 + 7000.0 * expit((np.minimum(ell, N_BINS - 1) - 6.0) / 1.5)
    return np.round(t * scale).astype(np.int64)


def latent_increments(truth: np.ndarray, n_bins: int, delta: float = DELTA, bin_width: float = BIN_WIDTH) -> np.ndarray:
    edges = np.arange(n_bins + 1) * bin_width
    raw = integrate_theta(np.asarray(truth, dtype=float)[: len(ODE_PARAMS)], edges, delta)
    return np.diff(raw[:, 0, :], axis=0)


def nb_draw(rng: np.random.Generator, mu: np.ndarray, phi: float) -> np.ndarray:
    mu = np.asarray(mu, dtype=float)
    lam = rng.gamma(phi, 1.0, size=mu.shape) * (mu / phi)
    return rng.poisson(lam).astype(np.int64)


def simulate_dataset(
    truth: ParamVector | np.ndarray = TABLE_A1,
    tests=None,
    seed: int = 0,
    pop_size: float = 3.18e6,
    delta: float = DELTA,
) -> SurveillanceSeries:
    """Draw cases (beta-binomial given tests) and deaths (negative binomial)."""
    theta = truth.as_array() if isinstance(truth, ParamVector) else np.asarray(truth, dtype=float)
    tests = default_test_schedule() if tests is None else np.asarray(tests, dtype=np.int64)
    L = tests.size
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 7])))
    d = latent_increments(theta, L, delta)
    rho, phi, alpha0, alpha1, kappa = theta[8:13]
    mu_d = rho * pop_size * np.maximum(d[:, IDX["N_IpD"]], 0.0)
    inc = np.clip(d[:, IDX["N_IeIp"]], 1e-12, None)
    mu_c = expit(alpha0 + alpha1 * logit(inc))
    psi = rng.beta(kappa * mu_c, kappa * (1.0 - mu_c))
    cases = rng.binomial(tests, psi)
    deaths = nb_draw(rng, mu_d, phi)
    return SurveillanceSeries(tests=tests, cases=cases, deaths=deaths, bin_width=BIN_WIDTH)


# --------------------------------------------------------------------------
# batch study

COMMON_PARAMS = PARAM_NAMES[:10]
DISPLAY_INV_SQRT = ("phi", "kappa", "phi_c")


def display_name(name: str) -> str:
    return f"inv_sqrt_{name}" if name in DISPLAY_INV_SQRT else name


def to_display(name: str, values):
    """Parameters are reported as tabulated: overdispersions as ``1/sqrt(.)``."""
    values = np.asarray(values, dtype=float)
    return 1.0 / np.sqrt(values) if name in DISPLAY_INV_SQRT else values


@dataclass
class SimStudyConfig:
    n_datasets: int = 100
    truth: ParamVector = field(default_factory=lambda: TABLE_A1)
    tests: np.ndarray | None = None
    models: tuple[str, ...] = ("test_aware", "no_tests")
    seed: int = 1
    sampler: SamplerConfig = field(default_factory=lambda: SamplerConfig(n_chains=2, n_draws=2000, n_warmup=1000, target_accept=0.9))
    n_bins: int = N_BINS
    holdout_bins: int = 9  # about four weeks of 3-day bins
    pop_size: float = 3.18e6
    delta: float = DELTA

    def __post_init__(self):
        if self.n_datasets < 1:
            raise ValueError("n_datasets must be at least 1")
        if self.holdout_bins < 0:
            raise ValueError("holdout_bins must be non-negative")
        bad = set(self.models) - {"test_aware", "no_tests"}
        if bad or not self.models:
            raise ValueError(f"unknown models {sorted(bad)}")
        if self.tests is None:
            self.tests = default_test_schedule(self.n_bins)
        self.tests = np.asarray(self.tests, dtype=np.int64)
        if self.tests.size != self.n_bins:
            raise ValueError(f"test schedule has {self.tests.size} bins, the study period has {self.n_bins}")
        theta = self.truth.as_array() if isinstance(self.truth, ParamVector) else np.asarray(self.truth, dtype=float)
        if not ParamVector.from_array(theta).in_support():
            raise ValueError("true parameters lie outside the support")

    @property
    def full_tests(self) -> np.ndarray:
        """Schedule over study plus holdout bins; the holdout repeats the last count."""
        return np.concatenate([self.tests, np.full(self.holdout_bins, self.tests[-1], dtype=np.int64)])

    def truth_array(self) -> np.ndarray:
        return self.truth.as_array() if isinstance(self.truth, ParamVector) else np.asarray(self.truth, dtype=float)

    def to_dict(self) -> dict:
        return {
            "n_datasets": self.n_datasets,
            "truth": dict(zip(PARAM_NAMES, map(float, self.truth_array()))),
            "tests": [int(t) for t in self.tests],
            "models": list(self.models),
            "seed": self.seed,
            "sampler": dict(self.sampler.__dict__),
            "n_bins": self.n_bins,
            "holdout_bins": self.holdout_bins,
            "pop_size": self.pop_size,
            "delta": self.delta,
        }

    def fit_hash(self) -> str:
        """Hash of everything a single dataset's results depend on (not ``n_datasets``)."""
        d = self.to_dict()
        d.pop("n_datasets")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def parameter_metrics(draws: np.ndarray, truth: float) -> tuple[float, float, bool, float, float, float]:
    """Relative absolute difference, relative 95% CI width and coverage.

    Returns ``(rel_abs_diff, rel_ci_width, covered, median, lower, upper)``.
    """
    med, lo, hi = np.quantile(draws, [0.5, 0.025, 0.975])
    return abs(med - truth) / abs(truth), (hi - lo) / abs(truth), bool(lo <= truth <= hi), med, lo, hi


def _dataset_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def fit_dataset(config: SimStudyConfig, index: int) -> list[dict]:
    """Simulate dataset ``index``, fit every model and return per-parameter rows."""
    from .analysis import forecast, interval_coverage
    from .diagnostics import DiagnosticsError
    from .fit import fit
    from .model import IntegrationError

    seed = _dataset_seed(config.seed, index)
    truth = config.truth_array()
    full = simulate_dataset(truth, config.full_tests, seed, config.pop_size, config.delta)
    data = SurveillanceSeries(full.tests[: config.n_bins], full.cases[: config.n_bins], full.deaths[: config.n_bins], full.bin_width)
    rows = []
    for model in config.models:
        sampler = SamplerConfig(**{**config.sampler.__dict__, "seed": seed})
        try:
            res = fit(data, model, config=sampler, pop_size=config.pop_size, delta=config.delta, workers=1)
        except (SamplerError, IntegrationError, DiagnosticsError, FloatingPointError) as exc:
            log.warning("dataset %d model %s failed: %s", index, model, exc)
            rows.append({"dataset": index, "model": model, "parameter": "", "status": "failed", "message": str(exc)})
            continue
        draws = res.draws
        max_rhat = res.diagnostics.max_rhat() if res.diagnostics is not None else float("nan")
        base = {"dataset": index, "model": model, "status": "ok", "message": "", "max_rhat": max_rhat, "n_divergent": int(draws.divergent.sum())}
        for j, name in enumerate(COMMON_PARAMS):
            t = float(to_display(name, truth[j]))
            rad, rcw, cov, med, lo, hi = parameter_metrics(to_display(name, draws[name]), t)
            rows.append({**base, "parameter": display_name(name), "truth": t, "median": med, "lower": lo, "upper": hi,
                         "rel_abs_diff": rad, "rel_ci_width": rcw, "covered": int(cov)})
        if model == "test_aware":
            for name in PARAM_NAMES[10:]:
                j = PARAM_NAMES.index(name)
                t = float(to_display(name, truth[j]))
                rad, rcw, cov, med, lo, hi = parameter_metrics(to_display(name, draws[name]), t)
                rows.append({**base, "parameter": display_name(name), "truth": t, "median": med, "lower": lo, "upper": hi,
                             "rel_abs_diff": rad, "rel_ci_width": rcw, "covered": int(cov)})
            if config.holdout_bins:
                fc = forecast(draws, config.n_bins, config.holdout_bins, full.bin_width, config.pop_size, config.delta, seed=seed)
                hit = interval_coverage(fc.deaths[:, config.n_bins:], full.deaths[config.n_bins:], 0.95)
                rows.append({**base, "parameter": "holdout_deaths", "truth": float(np.sum(full.deaths[config.n_bins:])),
                             "median": float("nan"), "lower": float("nan"), "upper": float("nan"),
                             "rel_abs_diff": float("nan"), "rel_ci_width": float("nan"), "covered": float(np.mean(hit)),
                             "holdout_hits": int(hit.sum()), "holdout_bins": int(hit.size)})
        else:
            for name in NO_TESTS_PARAM_NAMES[10:]:
                med, lo, hi = np.quantile(to_display(name, draws[name]), [0.5, 0.025, 0.975])
                rows.append({**base, "parameter": display_name(name), "truth": float("nan"), "median": med, "lower": lo, "upper": hi,
                             "rel_abs_diff": float("nan"), "rel_ci_width": float("nan"), "covered": float("nan")})
    return rows


def _fit_dataset_star(args):
    return fit_dataset(*args)


@dataclass
class StudyResult:
    config: SimStudyConfig
    rows: list[dict]

    def ok_rows(self, model: str | None = None, parameter: str | None = None) -> list[dict]:
        return [r for r in self.rows if r["status"] == "ok" and (model is None or r["model"] == model)
                and (parameter is None or r["parameter"] == parameter)]

    def failures(self) -> dict[str, int]:
        out = {m: 0 for m in self.config.models}
        for r in self.rows:
            if r["status"] == "failed":
                out[r["model"]] += 1
        return out

    def metric_table(self) -> list[dict]:
        """Per-model, per-parameter medians of (a) and (b) and percentage coverage (c)."""
        table = []
        for model in self.config.models:
            params = []
            for r in self.ok_rows(model):
                if r["parameter"] not in params and np.isfinite(r["truth"]) and r["parameter"] != "holdout_deaths":
                    params.append(r["parameter"])
            for p in params:
                rows = self.ok_rows(model, p)
                table.append({
                    "model": model,
                    "parameter": p,
                    "n_fits": len(rows),
                    "median_rel_abs_diff": float(np.median([r["rel_abs_diff"] for r in rows])),
                    "median_rel_ci_width": float(np.median([r["rel_ci_width"] for r in rows])),
                    "coverage_pct": 100.0 * float(np.mean([r["covered"] for r in rows])),
                })
        return table

    def holdout_coverage(self) -> float:
        """Fraction of held-out death bins inside their 95% predictive interval."""
        rows = self.ok_rows("test_aware", "holdout_deaths")
        hits = sum(r["holdout_hits"] for r in rows)
        total = sum(r["holdout_bins"] for r in rows)
        return hits / total if total else float("nan")

    def coverage(self, model: str, parameter: str) -> float:
        rows = self.ok_rows(model, parameter)
        return 100.0 * float(np.mean([r["covered"] for r in rows])) if rows else float("nan")

    def median_rel_abs_diff(self, model: str, parameter: str) -> float:
        rows = self.ok_rows(model, parameter)
        return float(np.median([r["rel_abs_diff"] for r in rows])) if rows else float("nan")


def _cache_path(cache_dir: str, index: int) -> str:
    return os.path.join(cache_dir, f"dataset_{index:04d}.json")


def _load_cached(cache_dir: str | None, index: int, key: str):
    if cache_dir is None:
        return None
    path = _cache_path(cache_dir, index)
    if not os.path.exists(path):
        return None
    with open(path) as fh:
        blob = json.load(fh)
    return blob["rows"] if blob.get("key") == key else None


def _store_cached(cache_dir: str, index: int, key: str, rows: list[dict]):
    os.makedirs(cache_dir, exist_ok=True)
    path = _cache_path(cache_dir, index)
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump({"key": key, "rows": rows}, fh, sort_keys=True)
    os.replace(tmp, path)


def run_study(config: SimStudyConfig, workers: int | None = None, progress=None, cache_dir: str | None = None) -> StudyResult:
    """Fit every model to ``config.n_datasets`` simulated datasets.

    Datasets are fitted concurrently; rows are reduced in dataset order, so
    results do not depend on the worker count. Failed fits are kept as
    ``status == "failed"`` rows and counted. With ``cache_dir`` each
    dataset's rows are stored as they finish and reused by later runs with
    the same settings, so long studies can be resumed.
    """
    from .sampler import default_workers

    workers = default_workers() if workers is None else workers
    key = config.fit_hash()
    results: list = [_load_cached(cache_dir, i, key) for i in range(config.n_datasets)]
    todo = [i for i, r in enumerate(results) if r is None]
    done = config.n_datasets - len(todo)

    def finish(i, rows):
        nonlocal done
        results[i] = rows
        if cache_dir is not None:
            _store_cached(cache_dir, i, key, rows)
        done += 1
        if progress:
            progress(done, config.n_datasets)

    if workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for i, rows in zip(todo, pool.map(_fit_dataset_star, [(config, i) for i in todo])):
                finish(i, rows)
    else:
        for i in todo:
            finish(i, fit_dataset(config, i))
    rows = [r for block in results for r in block]
    res = StudyResult(config, rows)
    for model, n in res.failures().items():
        if n:
            log.warning("%s: %d of %d fits failed and are excluded from the metrics", model, n, config.n_datasets)
    return res
