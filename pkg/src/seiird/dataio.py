"""Surveillance data ingestion, run configuration and output files.

Line-list CSV columns: ``id, date, result, death_date`` (ISO dates, result
``positive``/``negative``, ``death_date`` may be blank). Daily-count CSV
columns: ``date, tests, cases, deaths``.
"""

from __future__ import annotations

import csv
import datetime as dt
import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .model import DELTA
from .priors import NO_TESTS_PARAM_NAMES, PARAM_NAMES, Prior, PriorSpec
from .sampler import PosteriorDraws, SamplerConfig
from .surveillance import SurveillanceSeries

SCHEMA_VERSION = 1
DEFAULT_POP_SIZE = 3.18e6


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


# --------------------------------------------------------------------------
# line lists


@dataclass(frozen=True)
class LineListRecord:
    person_id: str
    specimen_date: dt.date
    result: str
    death_date: dt.date | None = None


@dataclass
class DailyCounts:
    dates: list[dt.date]
    tests: np.ndarray
    cases: np.ndarray
    deaths: np.ndarray

    def __len__(self):
        return len(self.dates)


def _parse_date(text: str, row: int, column: str) -> dt.date:
    try:
        return dt.date.fromisoformat(text.strip())
    except ValueError:
        raise DataError(f"row {row}: malformed {column} {text!r} (expected YYYY-MM-DD)") from None


def read_line_list(path) -> list[LineListRecord]:
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"id", "date", "result"} - set(reader.fieldnames or ())
        if missing:
            raise DataError(f"{path}: missing columns {sorted(missing)}")
        for row_no, row in enumerate(reader, start=2):
            result = (row["result"] or "").strip().lower()
            if result not in ("positive", "negative"):
                raise DataError(f"row {row_no}: result must be positive or negative, got {row['result']!r}")
            death = (row.get("death_date") or "").strip()
            records.append(
                LineListRecord(
                    person_id=row["id"].strip(),
                    specimen_date=_parse_date(row["date"], row_no, "date"),
                    result=result,
                    death_date=_parse_date(death, row_no, "death_date") if death else None,
                )
            )
    return records


def _date_range(start: dt.date, end: dt.date) -> list[dt.date]:
    return [start + dt.timedelta(days=i) for i in range((end - start).days + 1)]


def dedup_and_tabulate(records, start: dt.date, end: dt.date) -> DailyCounts:
    """Daily tests, cases and deaths over ``[start, end]`` from a line list.

    Each person contributes their tests up to and including the first
    positive; that positive is their single case and any later test, positive
    or negative, is dropped. Repeated ``(person, date, result)`` rows count
    once. Deaths are counted on ``death_date`` once per person.
    """
    dates = _date_range(start, end)
    index = {d: i for i, d in enumerate(dates)}
    tests = np.zeros(len(dates), dtype=np.int64)
    cases = np.zeros(len(dates), dtype=np.int64)
    deaths = np.zeros(len(dates), dtype=np.int64)

    by_person: dict[str, set[tuple[dt.date, str]]] = {}
    death_by_person: dict[str, dt.date] = {}
    for r in records:
        by_person.setdefault(r.person_id, set()).add((r.specimen_date, r.result))
        if r.death_date is not None:
            death_by_person.setdefault(r.person_id, r.death_date)

    for tests_of_person in by_person.values():
        # positives sort after negatives on the same day, so a same-day
        # negative still counts as a test before the first positive
        for date, result in sorted(tests_of_person, key=lambda t: (t[0], t[1] == "positive")):
            if date in index:
                tests[index[date]] += 1
                if result == "positive":
                    cases[index[date]] += 1
            if result == "positive":
                break
    for date in death_by_person.values():
        if date in index:
            deaths[index[date]] += 1
    return DailyCounts(dates, tests, cases, deaths)


def expand_to_line_list(daily: DailyCounts) -> list[LineListRecord]:
    """One synthetic person per test; used to check ``dedup_and_tabulate`` is a fixed point."""
    out = []
    k = 0
    for i, date in enumerate(daily.dates):
        for j in range(int(daily.tests[i])):
            out.append(LineListRecord(f"p{k}", date, "positive" if j < daily.cases[i] else "negative"))
            k += 1
        for _ in range(int(daily.deaths[i])):
            out.append(LineListRecord(f"d{k}", date, "negative", death_date=date))
            k += 1
    return out


def read_daily_counts(path) -> DailyCounts:
    dates, tests, cases, deaths = [], [], [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"date", "tests", "cases", "deaths"} - set(reader.fieldnames or ())
        if missing:
            raise DataError(f"{path}: missing columns {sorted(missing)}")
        for row_no, row in enumerate(reader, start=2):
            dates.append(_parse_date(row["date"], row_no, "date"))
            try:
                t, c, m = (int(row[k]) for k in ("tests", "cases", "deaths"))
            except (TypeError, ValueError):
                raise DataError(f"row {row_no}: counts must be integers") from None
            if min(t, c, m) < 0 or c > t:
                raise DataError(f"row {row_no}: counts must be non-negative with cases <= tests")
            tests.append(t)
            cases.append(c)
            deaths.append(m)
    for i in range(1, len(dates)):
        if (dates[i] - dates[i - 1]).days != 1:
            raise DataError(f"row {i + 2}: dates must be consecutive days")
    return DailyCounts(dates, np.array(tests, dtype=np.int64), np.array(cases, dtype=np.int64), np.array(deaths, dtype=np.int64))


def bin_counts(daily, width_days: int = 3) -> np.ndarray:
    """Sum consecutive non-overlapping blocks of ``width_days``."""
    x = np.asarray(daily)
    if width_days < 1:
        raise DataError("bin width must be at least one day")
    if x.shape[0] % width_days:
        raise DataError(f"series length {x.shape[0]} is not divisible by bin width {width_days}")
    return x.reshape(x.shape[0] // width_days, width_days, *x.shape[1:]).sum(axis=1)


def to_series(daily: DailyCounts, width_days: int = 3) -> SurveillanceSeries:
    return SurveillanceSeries(
        tests=bin_counts(daily.tests, width_days),
        cases=bin_counts(daily.cases, width_days),
        deaths=bin_counts(daily.deaths, width_days),
        bin_width=width_days / 7.0,
        start_date=daily.dates[0].isoformat() if daily.dates else None,
    )


def subset(daily: DailyCounts, start: dt.date, end: dt.date) -> DailyCounts:
    keep = [i for i, d in enumerate(daily.dates) if start <= d <= end]
    if len(keep) != (end - start).days + 1:
        raise DataError(f"daily counts do not cover {start} to {end}")
    return DailyCounts([daily.dates[i] for i in keep], daily.tests[keep], daily.cases[keep], daily.deaths[keep])


# --------------------------------------------------------------------------
# run configuration


@dataclass
class RunConfig:
    start: dt.date
    end: dt.date
    data_path: str
    data_format: str = "daily"  # or "line_list"
    bin_days: int = 3
    pop_size: float = DEFAULT_POP_SIZE
    delta: float = DELTA
    model: str = "test_aware"
    priors: PriorSpec = field(default_factory=PriorSpec.default)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    out_dir: str = "out"
    raw: dict = field(default_factory=dict)

    def __post_init__(self):
        span = (self.end - self.start).days + 1
        if span <= 0:
            raise ConfigError("period.end: must not precede period.start")
        if span % self.bin_days:
            raise ConfigError(f"period: {span} days is not divisible by bin_days={self.bin_days}")
        if not self.pop_size > 0:
            raise ConfigError("population size (population.size) must be positive")

    @property
    def n_bins(self) -> int:
        return ((self.end - self.start).days + 1) // self.bin_days

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.raw, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _get(d: dict, path: str, required=True, default=None):
    cur = d
    for part in path.split("."):
        if not isinstance(cur, dict) or part not in cur:
            if required:
                raise ConfigError(f"missing required key {path!r}")
            return default
        cur = cur[part]
    return cur


def parse_config(raw: dict, base_dir: str | os.PathLike = ".") -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    version = raw.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version: unsupported value {version!r}")
    try:
        start = dt.date.fromisoformat(str(_get(raw, "period.start")))
        end = dt.date.fromisoformat(str(_get(raw, "period.end")))
    except ValueError as e:
        raise ConfigError(f"period: {e}") from None
    try:
        pop = _get(raw, "population.size")
    except ConfigError:
        raise ConfigError("missing required key 'population.size' (population size)") from None
    model = _get(raw, "model", required=False, default="test_aware")
    if model not in ("test_aware", "no_tests"):
        raise ConfigError(f"model: expected test_aware or no_tests, got {model!r}")
    names = PARAM_NAMES if model == "test_aware" else NO_TESTS_PARAM_NAMES
    overrides = _get(raw, "priors", required=False, default={}) or {}
    prior_objs = {}
    for name, spec in overrides.items():
        if name not in names:
            raise ConfigError(f"priors.{name}: unknown parameter")
        try:
            prior_objs[name] = Prior(spec["family"], tuple(spec.get("params", ())))
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"priors.{name}: {e}") from None
    s = _get(raw, "sampler", required=False, default={}) or {}
    try:
        sampler = SamplerConfig(
            n_chains=int(s.get("chains", 4)),
            n_draws=int(s.get("draws", 8000)),
            n_warmup=int(s.get("warmup", 4000)),
            target_accept=float(s.get("target_accept", 0.8)),
            max_tree_depth=int(s.get("max_tree_depth", 10)),
            seed=int(s.get("seed", 1)),
            metric=str(s.get("metric", "diag")),
        )
    except ValueError as e:
        raise ConfigError(f"sampler: {e}") from None
    data_path = str(_get(raw, "data.path"))
    if not os.path.isabs(data_path):
        data_path = os.path.normpath(os.path.join(base_dir, data_path))
    fmt = _get(raw, "data.format", required=False, default="daily")
    if fmt not in ("daily", "line_list"):
        raise ConfigError(f"data.format: expected daily or line_list, got {fmt!r}")
    return RunConfig(
        start=start,
        end=end,
        data_path=data_path,
        data_format=fmt,
        bin_days=int(_get(raw, "period.bin_days", required=False, default=3)),
        pop_size=float(pop),
        delta=float(_get(raw, "model_constants.delta", required=False, default=DELTA)),
        model=model,
        priors=PriorSpec.default(model).with_overrides(prior_objs),
        sampler=sampler,
        out_dir=str(_get(raw, "output.dir", required=False, default="out")),
        raw=raw,
    )


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"{path}: config file not found")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: not valid YAML ({e})") from None
    return parse_config(raw, base_dir=path.parent)


def load_series(cfg: RunConfig) -> SurveillanceSeries:
    if cfg.data_format == "line_list":
        daily = dedup_and_tabulate(read_line_list(cfg.data_path), cfg.start, cfg.end)
    else:
        daily = subset(read_daily_counts(cfg.data_path), cfg.start, cfg.end)
    return to_series(daily, cfg.bin_days)


# --------------------------------------------------------------------------
# outputs


def atomic_write_text(path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def csv_text(header, rows) -> str:
    lines = [",".join(header)]
    lines += [",".join(_fmt(v) if not isinstance(v, str) else v for v in row) for row in rows]
    return "\n".join(lines) + "\n"


def write_csv(path, header, rows):
    atomic_write_text(path, csv_text(header, rows))


def write_draws(draws: PosteriorDraws, path):
    header = list(draws.names) + ["lp", "chain", "divergent", "tree_depth", "step_size"]
    rows = (
        list(draws.params[i]) + [draws.lp[i], int(draws.chain[i]), bool(draws.divergent[i]), int(draws.tree_depth[i]), draws.step_size[i]]
        for i in range(len(draws))
    )
    write_csv(path, header, rows)


def read_draws(path) -> PosteriorDraws:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [r for r in reader]
    meta = ["lp", "chain", "divergent", "tree_depth", "step_size"]
    names = tuple(h for h in header if h not in meta)
    arr = np.array([[float(v) for v in r] for r in rows]) if rows else np.empty((0, len(header)))
    col = {h: i for i, h in enumerate(header)}
    return PosteriorDraws(
        names=names,
        params=arr[:, [col[n] for n in names]],
        chain=arr[:, col["chain"]].astype(int),
        lp=arr[:, col["lp"]],
        divergent=arr[:, col["divergent"]].astype(bool),
        tree_depth=arr[:, col["tree_depth"]].astype(int),
        step_size=arr[:, col["step_size"]],
    )


def write_series(series: SurveillanceSeries, path):
    rows = ((i, int(t), int(c), int(m)) for i, (t, c, m) in enumerate(zip(series.tests, series.cases, series.deaths)))
    write_csv(path, ["bin", "tests", "cases", "deaths"], rows)


def read_series(path, bin_width: float = 3.0 / 7.0) -> SurveillanceSeries:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
    try:
        return SurveillanceSeries(
            tests=[int(r["tests"]) for r in rows],
            cases=[int(r["cases"]) for r in rows],
            deaths=[int(r["deaths"]) for r in rows],
            bin_width=bin_width,
        )
    except (KeyError, ValueError) as e:
        raise DataError(f"{path}: {e}") from None


def write_json(path, obj):
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (dt.date,)):
        return o.isoformat()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def read_json(path) -> dict:
    return json.loads(Path(path).read_text())


def write_daily_counts(daily: DailyCounts, path):
    rows = ((d.isoformat(), int(t), int(c), int(m)) for d, t, c, m in zip(daily.dates, daily.tests, daily.cases, daily.deaths))
    write_csv(path, ["date", "tests", "cases", "deaths"], rows)
