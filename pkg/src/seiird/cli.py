"""Command-line workflows: simulate, fit, summarize, forecast and sim-study.

Every command prints exactly one JSON line on standard output describing the
result; progress and warnings go to standard error. Outputs are written
atomically and contain no timestamps, so reruns with the same inputs and
seed produce identical files.

Exit codes: 0 success (possibly with warnings), 1 configuration, data or
validation error, 2 convergence failure (some R-hat above 1.05).
"""

from __future__ import annotations

import argparse
import datetime as dt
import json
import logging
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .analysis import (
    bayes_factor_Re_gt_1,
    effective_R,
    forecast,
    horizon_bins,
    latent_summaries,
    underreporting_factor,
)
from .dataio import (
    ConfigError,
    DailyCounts,
    DataError,
    RunConfig,
    atomic_write_text,
    load_config,
    load_series,
    parse_config,
    read_draws,
    read_json,
    read_series,
    write_csv,
    write_daily_counts,
    write_draws,
    write_json,
    write_series,
)
from .diagnostics import DiagnosticsError, diagnostics
from .fit import fit
from .model import IntegrationError
from .priors import PARAM_NAMES, TABLE_A1, MomentError, ParamVector, PriorSpec
from .sampler import SamplerConfig, SamplerError
from .simstudy import SimStudyConfig, default_test_schedule, display_name, run_study, simulate_dataset, to_display

log = logging.getLogger("seiird")

RHAT_FAIL = 1.05
RHAT_WARN = 1.01
DEFAULT_HORIZON_WEEKS = 4.0


@dataclass
class CommandResult:
    exit_code: int
    artifacts: list[str] = field(default_factory=list)
    summary: str = ""
    details: dict = field(default_factory=dict)

    def as_json(self, command: str) -> str:
        blob = {"command": command, "exit_code": self.exit_code, "artifacts": self.artifacts, "summary": self.summary}
        blob.update(self.details)
        return json.dumps(blob, sort_keys=True, default=float)


class _Artifacts:
    """Collects written files as paths relative to the output directory."""

    def __init__(self, out_dir: Path):
        self.out_dir = out_dir
        self.paths: list[str] = []

    def path(self, name: str) -> Path:
        p = self.out_dir / name
        self.paths.append(name)
        return p


# --------------------------------------------------------------------------
# simulate


def _truth_from(raw: dict) -> ParamVector:
    values = dict(zip(PARAM_NAMES, TABLE_A1.as_array()))
    for k, v in (raw or {}).items():
        if k not in values:
            raise ConfigError(f"simulation.truth.{k}: unknown parameter")
        values[k] = float(v)
    truth = ParamVector(**values)
    if not truth.in_support():
        raise ConfigError("simulation.truth: values outside the parameter support")
    return truth


def _tests_from(sim: dict, n_bins: int) -> np.ndarray:
    tests = sim.get("tests")
    if tests is None:
        return default_test_schedule(n_bins, float(sim.get("test_scale", 1.0)))
    tests = np.asarray(tests, dtype=np.int64)
    if tests.size != n_bins:
        raise ConfigError(f"simulation.tests: {tests.size} counts for a period of {n_bins} bins")
    return tests


def spread_bins_to_days(values: np.ndarray, width: int) -> np.ndarray:
    """Split bin totals over ``width`` days; earlier days take the remainder."""
    values = np.asarray(values, dtype=np.int64)
    base, rem = np.divmod(values, width)
    days = np.repeat(base[:, None], width, axis=1)
    days += np.arange(width)[None, :] < rem[:, None]
    return days.reshape(-1)


def cmd_simulate(config_path: str, out: str | None = None, seed: int | None = None) -> CommandResult:
    raw, cfg = _load_raw(config_path)
    sim = raw.get("simulation", {}) or {}
    truth = _truth_from(sim.get("truth"))
    tests = _tests_from(sim, cfg.n_bins)
    seed = int(sim.get("seed", 1)) if seed is None else seed
    series = simulate_dataset(truth, tests, seed, cfg.pop_size, cfg.delta)
    out_dir = Path(out or cfg.out_dir)
    arts = _Artifacts(out_dir)
    dates = [cfg.start + dt.timedelta(days=i) for i in range(cfg.n_bins * cfg.bin_days)]
    daily = DailyCounts(
        dates,
        spread_bins_to_days(series.tests, cfg.bin_days),
        spread_bins_to_days(series.cases, cfg.bin_days),
        spread_bins_to_days(series.deaths, cfg.bin_days),
    )
    write_daily_counts(daily, arts.path("daily_counts.csv"))
    write_series(series, arts.path("bins.csv"))
    fit_raw = {k: v for k, v in raw.items() if k != "simulation"}
    fit_raw["data"] = {"path": "daily_counts.csv", "format": "daily"}
    fit_raw.setdefault("output", {})
    atomic_write_text(arts.path("fit_config.yaml"), yaml.safe_dump(fit_raw, sort_keys=True))
    write_json(
        arts.path("manifest.json"),
        {
            "command": "simulate",
            "version": __version__,
            "seed": seed,
            "config_hash": cfg.config_hash(),
            "truth": dict(zip(PARAM_NAMES, truth.as_array())),
            "n_bins": cfg.n_bins,
        },
    )
    return CommandResult(0, arts.paths, f"simulated {cfg.n_bins} bins with seed {seed}", {"out_dir": str(out_dir)})


# --------------------------------------------------------------------------
# fit and summarize


def _load_raw(config_path: str) -> tuple[dict, RunConfig]:
    path = Path(config_path)
    if not path.exists():
        raise ConfigError(f"{path}: config file not found")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: not valid YAML ({e})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config root must be a mapping")
    sim_only = "data" not in raw
    if sim_only:
        raw = {**raw, "data": {"path": "unused.csv"}}
    cfg = parse_config(raw, base_dir=path.parent)
    return raw, cfg


def _override_sampler(sampler: SamplerConfig, seed=None, chains=None, draws=None, warmup=None) -> SamplerConfig:
    changes = {k: v for k, v in (("seed", seed), ("n_chains", chains), ("n_draws", draws), ("n_warmup", warmup)) if v is not None}
    try:
        return replace(sampler, **changes)
    except ValueError as e:
        raise ConfigError(f"sampler: {e}") from None


def cmd_fit(config_path: str, out: str | None = None, seed=None, chains=None, draws=None, warmup=None) -> CommandResult:
    cfg = load_config(config_path)
    sampler = _override_sampler(cfg.sampler, seed, chains, draws, warmup)
    if sampler.n_chains < 2:
        raise ConfigError("sampler.chains: diagnostics require at least 2 chains")
    if sampler.iter_per_chain - sampler.warmup_per_chain < 100:
        raise ConfigError("sampler: need at least 100 retained draws per chain for diagnostics")
    series = load_series(cfg)
    out_dir = Path(out or cfg.out_dir)
    log.info("fitting %s model to %d bins (%d chains)", cfg.model, series.L, sampler.n_chains)
    result = fit(series, cfg.model, cfg.priors, sampler, cfg.pop_size, cfg.delta)
    arts = _Artifacts(out_dir)
    write_draws(result.draws, arts.path("draws.csv"))
    write_series(series, arts.path("series.csv"))
    run = {
        "model": cfg.model,
        "pop_size": cfg.pop_size,
        "delta": cfg.delta,
        "bin_days": cfg.bin_days,
        "start": cfg.start.isoformat(),
        "end": cfg.end.isoformat(),
        "priors": cfg.priors.to_dict(),
        "sampler": dict(sampler.__dict__),
        "config_hash": cfg.config_hash(),
    }
    write_json(arts.path("run.json"), run)
    summary = cmd_summarize(str(out_dir))
    max_rhat = summary.details["max_rhat"]
    n_div = int(result.draws.divergent.sum())
    manifest = {
        "command": "fit",
        "version": __version__,
        "seed": sampler.seed,
        "config_hash": cfg.config_hash(),
        "model": cfg.model,
        "diagnostics": {
            "max_rhat": max_rhat,
            "rhat": summary.details["rhat"],
            "ess_bulk": summary.details["ess_bulk"],
            "n_divergent": n_div,
            "positivity_floor_events": result.posterior.floor_events.count,
        },
        "artifacts": sorted(arts.paths + summary.artifacts + ["manifest.json"]),
    }
    write_json(arts.path("manifest.json"), manifest)
    paths = sorted(set(arts.paths + summary.artifacts))
    details = {"out_dir": str(out_dir), "max_rhat": max_rhat, "n_divergent": n_div}
    if max_rhat > RHAT_FAIL:
        return CommandResult(2, paths, f"not converged: max R-hat {max_rhat:.3f} > {RHAT_FAIL}", details)
    msg = f"fit complete, max R-hat {max_rhat:.3f}"
    if max_rhat > RHAT_WARN:
        log.warning("max R-hat %.3f exceeds %.2f; consider more draws", max_rhat, RHAT_WARN)
        msg += " (warning: above 1.01)"
    return CommandResult(0, paths, msg, details)


def _require(fit_dir: Path, *names: str):
    missing = [n for n in names if not (fit_dir / n).exists()]
    if missing:
        raise DataError(f"{fit_dir}: missing fit artifacts {missing}; run 'seiird fit' first")


def _fmt_rows(table, first_col):
    return [[str(lab)] + list(row) for lab, row in table.rows()] if first_col is None else [[first_col(lab)] + list(row) for lab, row in table.rows()]


def cmd_summarize(fit_dir: str, out: str | None = None, n_prior: int = 100_000) -> CommandResult:
    """Posterior, derived-quantity and latent-trajectory summaries of a fit directory."""
    from .plotting import ribbon_plot, trace_plot

    fit_dir = Path(fit_dir)
    _require(fit_dir, "draws.csv", "series.csv", "run.json")
    run = read_json(fit_dir / "run.json")
    draws = read_draws(fit_dir / "draws.csv")
    series = read_series(fit_dir / "series.csv", run["bin_days"] / 7.0)
    out_dir = Path(out) if out else fit_dir
    arts = _Artifacts(out_dir)
    try:
        diag = diagnostics(draws)
    except DiagnosticsError as e:
        raise DataError(str(e)) from None

    header = ["parameter", "mean", "sd", "median", "lower95", "upper95", "rhat", "ess_bulk", "ess_tail"]
    rows = []
    for j, name in enumerate(draws.names):
        x = draws.params[:, j]
        lo, med, hi = np.quantile(x, [0.025, 0.5, 0.975])
        rows.append([name, x.mean(), x.std(ddof=1), med, lo, hi, diag.rhat[j], diag.ess_bulk[j], diag.ess_tail[j]])
        if name in ("phi", "kappa", "phi_c"):
            y = to_display(name, x)
            lo, med, hi = np.quantile(y, [0.025, 0.5, 0.975])
            rows.append([display_name(name), y.mean(), y.std(ddof=1), med, lo, hi, diag.rhat[j], diag.ess_bulk[j], diag.ess_tail[j]])
    write_csv(arts.path("posterior_summary.csv"), header, rows)

    t_end = series.L * series.bin_width
    re_end = effective_R(draws, t_end, run["delta"])
    priors = PriorSpec.from_dict(run["priors"], run["model"])
    bf = bayes_factor_Re_gt_1(draws, priors, t_end, n_prior=n_prior, seed=int(run["sampler"]["seed"]), delta=run["delta"])
    derived = {
        "R0": draws["R0"],
        "Re_end": re_end,
        "ifr": draws["eta"],
        "death_detection_rate": draws["rho"],
    }
    if series.cases.sum() > 0:
        derived["case_underreporting_factor"] = underreporting_factor(draws, float(series.cases.sum()), t_end, run["pop_size"], run["delta"])
    d_rows = []
    for name, x in derived.items():
        lo, med, hi = np.quantile(x, [0.025, 0.5, 0.975])
        d_rows.append([name, med, lo, hi])
    write_csv(arts.path("derived.csv"), ["quantity", "median", "lower95", "upper95"], d_rows)
    write_json(
        arts.path("bayes_factor.json"),
        {
            "hypothesis": "Re(t_end) > 1",
            "t_end_weeks": t_end,
            "bayes_factor": bf.value,
            "bound": bf.bound,
            "posterior_prob": bf.posterior_prob,
            "prior_prob": bf.prior_prob,
            "display": str(bf),
        },
    )

    latent = latent_summaries(draws, series.L, series.bin_width, run["pop_size"], run["delta"])
    for name, table in latent.items():
        write_csv(arts.path(f"latent_{name}.csv"), ["time_weeks"] + table.header(), _fmt_rows(table, float))
        ribbon_plot(table, str(arts.path(f"latent_{name}.svg")), name.replace("_", " "), "people", x=np.asarray(table.labels))
    trace_plot(draws, str(arts.path("trace.svg")))
    arts.paths = sorted(arts.paths)
    finite = ~diag.degenerate
    max_rhat = float(np.max(diag.rhat[finite])) if finite.any() else float("nan")
    details = {
        "max_rhat": max_rhat,
        "rhat": dict(zip(draws.names, map(float, diag.rhat))),
        "ess_bulk": dict(zip(draws.names, map(float, diag.ess_bulk))),
        "bayes_factor": str(bf),
    }
    return CommandResult(0, arts.paths, f"summarized {len(draws)} draws; {bf} for Re > 1", details)


# --------------------------------------------------------------------------
# forecast


def cmd_forecast(fit_dir: str, horizon_weeks: float = DEFAULT_HORIZON_WEEKS, out: str | None = None, seed: int | None = None) -> CommandResult:
    from .plotting import ribbon_plot

    fit_dir = Path(fit_dir)
    _require(fit_dir, "draws.csv", "series.csv", "run.json")
    if not horizon_weeks > 0:
        raise ConfigError(f"--horizon: must be positive, got {horizon_weeks}")
    run = read_json(fit_dir / "run.json")
    bin_width = run["bin_days"] / 7.0
    n_ahead = horizon_bins(horizon_weeks, bin_width)
    if n_ahead < 1:
        raise ConfigError(f"--horizon: {horizon_weeks} weeks is shorter than one bin")
    draws = read_draws(fit_dir / "draws.csv")
    series = read_series(fit_dir / "series.csv", bin_width)
    seed = int(run["sampler"]["seed"]) if seed is None else seed
    fc = forecast(draws, series.L, n_ahead, bin_width, run["pop_size"], run["delta"], seed=seed)
    out_dir = Path(out) if out else fit_dir
    arts = _Artifacts(out_dir)
    observed = {"deaths": series.deaths, "positivity": series.cases / np.maximum(series.tests, 1)}
    for name, table in fc.summaries().items():
        write_csv(arts.path(f"forecast_{name}.csv"), ["bin"] + table.header(), _fmt_rows(table, int))
        ribbon_plot(table, str(arts.path(f"forecast_{name}.svg")), f"posterior predictive {name}", name,
                    observed=observed.get(name), split=series.L - 0.5)
    write_json(
        arts.path("forecast_manifest.json"),
        {"command": "forecast", "version": __version__, "seed": seed, "horizon_weeks": horizon_weeks, "horizon_bins": n_ahead,
         "n_train_bins": series.L, "artifacts": sorted(arts.paths + ["forecast_manifest.json"])},
    )
    return CommandResult(0, sorted(arts.paths), f"forecast {n_ahead} bins ({horizon_weeks:g} weeks) ahead", {"out_dir": str(out_dir)})


# --------------------------------------------------------------------------
# simulation study


FULL_SCALE = {"n_datasets": 1000, "sampler": SamplerConfig(n_chains=4, n_draws=8000, n_warmup=4000, target_accept=0.9)}


def study_config_from(raw: dict, seed=None, chains=None, draws=None, warmup=None, full_scale=False) -> SimStudyConfig:
    st = (raw or {}).get("simstudy", {}) or {}
    base = SimStudyConfig.__dataclass_fields__
    sampler = base["sampler"].default_factory()
    n_datasets = int(st.get("n_datasets", base["n_datasets"].default))
    if full_scale:
        n_datasets, sampler = FULL_SCALE["n_datasets"], FULL_SCALE["sampler"]
    if "sampler" in st:
        s = st["sampler"]
        try:
            sampler = replace(sampler, **{k2: t(s[k1]) for k1, k2, t in (
                ("chains", "n_chains", int), ("draws", "n_draws", int), ("warmup", "n_warmup", int),
                ("target_accept", "target_accept", float), ("max_tree_depth", "max_tree_depth", int),
                ("metric", "metric", str)) if k1 in s})
        except ValueError as e:
            raise ConfigError(f"simstudy.sampler: {e}") from None
    sampler = _override_sampler(sampler, None, chains, draws, warmup)
    n_bins = int(st.get("n_bins", base["n_bins"].default))
    try:
        return SimStudyConfig(
            n_datasets=n_datasets,
            truth=_truth_from(st.get("truth")),
            tests=_tests_from(st, n_bins),
            models=tuple(st.get("models", base["models"].default)),
            seed=int(st.get("seed", 1)) if seed is None else seed,
            sampler=sampler,
            n_bins=n_bins,
            holdout_bins=int(st.get("holdout_bins", base["holdout_bins"].default)),
            pop_size=float(st.get("pop_size", base["pop_size"].default)),
            delta=float(st.get("delta", base["delta"].default)),
        )
    except ValueError as e:
        raise ConfigError(f"simstudy: {e}") from None


def cmd_sim_study(config_path: str | None, out: str | None = None, seed=None, chains=None, draws=None, warmup=None,
                  full_scale: bool = False) -> CommandResult:
    from .plotting import box_plot

    raw = {}
    if config_path is not None:
        path = Path(config_path)
        if not path.exists():
            raise ConfigError(f"{path}: config file not found")
        raw = yaml.safe_load(path.read_text()) or {}
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config root must be a mapping")
    config = study_config_from(raw, seed, chains, draws, warmup, full_scale)
    out_dir = Path(out or (raw.get("output", {}) or {}).get("dir", "sim_study"))
    arts = _Artifacts(out_dir)

    def progress(done, total):
        log.info("sim-study: %d/%d datasets", done, total)

    res = run_study(config, progress=progress, cache_dir=str(out_dir / "cache"))
    table = res.metric_table()
    write_csv(arts.path("metrics.csv"), ["model", "parameter", "n_fits", "median_rel_abs_diff", "median_rel_ci_width", "coverage_pct"],
              [[r["model"], r["parameter"], r["n_fits"], r["median_rel_abs_diff"], r["median_rel_ci_width"], r["coverage_pct"]] for r in table])
    # one row per parameter, one coverage column per model
    params = list(dict.fromkeys(r["parameter"] for r in table))
    cov = {(r["model"], r["parameter"]): r["coverage_pct"] for r in table}
    write_csv(arts.path("coverage_table.csv"), ["parameter"] + [f"coverage_{m}" for m in config.models],
              [[p] + [cov.get((m, p), float("nan")) for m in config.models] for p in params])
    cols = ["dataset", "model", "parameter", "status", "truth", "median", "lower", "upper", "rel_abs_diff", "rel_ci_width", "covered", "max_rhat", "n_divergent", "message"]
    per = [[r.get(c, float("nan")) if c != "message" else r.get("message", "").replace(",", ";").replace("\n", " ") for c in cols] for r in res.rows]
    per = [[v if v is not None else "" for v in row] for row in per]
    write_csv(arts.path("per_dataset.csv"), cols, per)
    for metric, label in (("rel_abs_diff", "relative absolute difference"), ("rel_ci_width", "relative 95% CI width")):
        groups = {}
        for p in params:
            for m in config.models:
                vals = np.array([r[metric] for r in res.ok_rows(m, p)], dtype=float)
                if vals.size and np.isfinite(vals).any():
                    groups[f"{p}\n{m}"] = vals
        box_plot(groups, str(arts.path(f"{metric}.svg")), label, label)
    failures = res.failures()
    holdout = res.holdout_coverage()
    manifest = {
        "command": "sim-study",
        "version": __version__,
        "seed": config.seed,
        "config": config.to_dict(),
        "config_hash": config.fit_hash(),
        "failures": failures,
        "holdout_death_coverage_95": holdout,
        "artifacts": sorted(arts.paths + ["manifest.json"]),
    }
    write_json(arts.path("manifest.json"), manifest)
    details = {"out_dir": str(out_dir), "failures": failures, "holdout_death_coverage_95": holdout}
    for m in config.models:
        details[f"coverage_R0_{m}"] = res.coverage(m, "R0")
    summary = ", ".join(f"{m} R0 coverage {res.coverage(m, 'R0'):.0f}%" for m in config.models)
    return CommandResult(0, sorted(arts.paths), summary, details)


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seiird", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def sampler_flags(p):
        p.add_argument("--seed", type=int)
        p.add_argument("--chains", type=int)
        p.add_argument("--draws", type=int, help="total draws over all chains, warmup included")
        p.add_argument("--warmup", type=int, help="total warmup draws over all chains")

    p = sub.add_parser("simulate", help="simulate a surveillance series and a matching fit config")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("fit", help="fit a model to surveillance data")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    sampler_flags(p)

    p = sub.add_parser("summarize", help="(re)write summaries for a fit directory")
    p.add_argument("fit_dir")
    p.add_argument("--out")

    p = sub.add_parser("forecast", help="posterior predictive deaths and positivity")
    p.add_argument("fit_dir")
    p.add_argument("--horizon", type=float, default=DEFAULT_HORIZON_WEEKS, help="weeks ahead (default 4)")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("sim-study", help="simulation study comparing test-aware and no-tests models")
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--full-scale", action="store_true", help="1000 datasets with 4 chains of 2000 iterations")
    sampler_flags(p)
    return parser


def run(argv=None) -> tuple[str, CommandResult]:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger("numba").setLevel(logging.WARNING)
    logging.getLogger("matplotlib").setLevel(logging.WARNING)
    try:
        if args.command == "simulate":
            res = cmd_simulate(args.config, args.out, args.seed)
        elif args.command == "fit":
            res = cmd_fit(args.config, args.out, args.seed, args.chains, args.draws, args.warmup)
        elif args.command == "summarize":
            res = cmd_summarize(args.fit_dir, args.out)
        elif args.command == "forecast":
            res = cmd_forecast(args.fit_dir, args.horizon, args.out, args.seed)
        else:
            res = cmd_sim_study(args.config, args.out, args.seed, args.chains, args.draws, args.warmup, args.full_scale)
    except (ConfigError, DataError, MomentError) as e:
        log.error("%s", e)
        res = CommandResult(1, summary=str(e))
    except (SamplerError, IntegrationError, DiagnosticsError, ValueError) as e:
        log.error("%s: %s", type(e).__name__, e)
        res = CommandResult(1, summary=f"{type(e).__name__}: {e}")
    return args.command, res


def main(argv=None) -> int:
    command, res = run(argv)
    sys.stdout.write(res.as_json(command) + "\n")
    sys.stdout.flush()
    return res.exit_code


if __name__ == "__main__":
    sys.exit(main())
