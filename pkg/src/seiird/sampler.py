"""No-U-Turn Hamiltonian Monte Carlo with warmup adaptation.

Multinomial trajectory sampling with the generalised no-U-turn criterion,
dual-averaging step size adaptation and an inverse metric (diagonal by
default, optionally dense) estimated over expanding warmup windows. Chains are independent and each owns a Philox
stream keyed by ``(seed, chain)``.
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

log = logging.getLogger(__name__)

DIVERGENCE_THRESHOLD = 1000.0

LogDensity = Callable[[np.ndarray], "tuple[float, np.ndarray]"]


class SamplerError(RuntimeError):
    pass


@dataclass
class SamplerConfig:
    """Totals are across chains, as in "8000 draws with 4000 warmup over 4 chains"."""

    n_chains: int = 4
    n_draws: int = 8000
    n_warmup: int = 4000
    target_accept: float = 0.8
    max_tree_depth: int = 10
    seed: int = 1
    metric: str = "diag"

    def __post_init__(self):
        if self.n_chains < 1:
            raise ValueError("n_chains must be at least 1")
        if not 0 <= self.n_warmup < self.n_draws:
            raise ValueError("n_warmup must be non-negative and smaller than n_draws")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target_accept must lie in (0, 1)")
        if self.max_tree_depth < 0:
            raise ValueError("max_tree_depth must be non-negative")
        if self.metric not in ("diag", "dense"):
            raise ValueError(f"metric must be 'diag' or 'dense', got {self.metric!r}")

    @property
    def iter_per_chain(self) -> int:
        return self.n_draws // self.n_chains

    @property
    def warmup_per_chain(self) -> int:
        return self.n_warmup // self.n_chains


@dataclass
class PosteriorDraws:
    """Retained draws, stacked chain after chain."""

    names: tuple[str, ...]
    params: np.ndarray
    chain: np.ndarray
    lp: np.ndarray
    divergent: np.ndarray
    tree_depth: np.ndarray
    step_size: np.ndarray
    accept_stat: np.ndarray = field(default=None)
    energy_error: np.ndarray = field(default=None)
    n_leapfrog: np.ndarray = field(default=None)

    @property
    def n_chains(self) -> int:
        return int(np.unique(self.chain).size)

    def __len__(self) -> int:
        return int(self.params.shape[0])

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[:, self.names.index(name)]

    def by_chain(self, name: str | None = None) -> np.ndarray:
        """``(n_chains, n_per_chain[, dim])`` view of the draws."""
        values = self.params if name is None else self[name]
        chains = np.unique(self.chain)
        return np.stack([values[self.chain == c] for c in chains])


# --------------------------------------------------------------------------
# adaptation


class DualAveraging:
    def __init__(self, step_size: float, target: float, gamma=0.05, t0=10.0, kappa=0.75):
        self.target, self.gamma, self.t0, self.kappa = target, gamma, t0, kappa
        self.restart(step_size)

    def restart(self, step_size: float):
        self.mu = math.log(10.0 * step_size)
        self.counter = 0
        self.s_bar = 0.0
        self.x_bar = 0.0

    def update(self, accept_stat: float) -> float:
        self.counter += 1
        accept_stat = min(1.0, accept_stat)
        eta = 1.0 / (self.counter + self.t0)
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.target - accept_stat)
        x = self.mu - self.s_bar * math.sqrt(self.counter) / self.gamma
        x_eta = self.counter ** (-self.kappa)
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * x
        return math.exp(x)

    @property
    def final_step_size(self) -> float:
        return math.exp(self.x_bar)


def warmup_windows(n_warmup: int, init_frac=0.15, term_frac=0.10) -> tuple[int, int, list[int]]:
    """Ends of the metric-estimation windows.

    Returns ``(init_buffer, term_buffer, window_ends)``; windows double in
    length and the last one is stretched to the start of the terminal buffer.
    """
    if n_warmup < 20:
        return n_warmup, 0, []
    init = int(init_frac * n_warmup)
    term = int(term_frac * n_warmup)
    slow_end = n_warmup - term
    base = max(1, (slow_end - init) // 15)
    ends = []
    start, size = init, base
    while start < slow_end:
        end = start + size
        if end + 2 * size > slow_end:
            end = slow_end
        ends.append(end)
        start, size = end, 2 * size
    return init, term, ends


class WelfordVariance:
    def __init__(self, dim: int):
        self.n = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def add(self, x: np.ndarray):
        self.n += 1
        d = x - self.mean
        self.mean += d / self.n
        self.m2 += d * (x - self.mean)

    def regularized(self) -> np.ndarray:
        n = self.n
        var = self.m2 / max(n - 1, 1)
        return (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))


class WelfordCovariance:
    def __init__(self, dim: int):
        self.n = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros((dim, dim))

    def add(self, x: np.ndarray):
        self.n += 1
        d = x - self.mean
        self.mean += d / self.n
        self.m2 += np.outer(x - self.mean, d)

    def regularized(self) -> np.ndarray:
        n = self.n
        cov = self.m2 / max(n - 1, 1)
        cov = 0.5 * (cov + cov.T)
        return (n / (n + 5.0)) * cov + 1e-3 * (5.0 / (n + 5.0)) * np.eye(cov.shape[0])


# --------------------------------------------------------------------------
# NUTS transition


class _Point:
    __slots__ = ("z", "p", "g", "lp")

    def __init__(self, z, p, g, lp):
        self.z, self.p, self.g, self.lp = z, p, g, lp


class NUTS:
    def __init__(self, log_density: LogDensity, dim: int, rng: np.random.Generator, max_tree_depth=10):
        self.log_density = log_density
        self.dim = dim
        self.rng = rng
        self.max_tree_depth = max_tree_depth
        self.step_size = 1.0
        self.set_inv_metric(np.ones(dim))

    def set_inv_metric(self, inv_metric: np.ndarray):
        """A vector sets a diagonal metric, a matrix a dense one."""
        self.inv_metric = np.asarray(inv_metric, dtype=float)
        self.dense = self.inv_metric.ndim == 2
        if self.dense:
            self._chol = np.linalg.cholesky(self.inv_metric)

    def velocity(self, p):
        return self.inv_metric @ p if self.dense else self.inv_metric * p

    def kinetic(self, p):
        return 0.5 * float(np.dot(p, self.velocity(p)))

    def leapfrog(self, pt: _Point, eps: float) -> _Point:
        p = pt.p + 0.5 * eps * pt.g
        z = pt.z + eps * self.velocity(p)
        lp, g = self.log_density(z)
        p = p + 0.5 * eps * g
        return _Point(z, p, g, lp)

    def hamiltonian(self, pt: _Point) -> float:
        h = -pt.lp + self.kinetic(pt.p)
        return h if math.isfinite(h) else math.inf

    def sample_momentum(self):
        xi = self.rng.standard_normal(self.dim)
        if self.dense:
            # p ~ N(0, M) with M^-1 = L L^T
            return np.linalg.solve(self._chol.T, xi)
        return xi / np.sqrt(self.inv_metric)

    def find_reasonable_step_size(self, z, lp, g):
        eps = self.step_size
        pt = _Point(z, self.sample_momentum(), g, lp)
        h0 = self.hamiltonian(pt)
        new = self.leapfrog(pt, eps)
        delta_h = h0 - self.hamiltonian(new)
        direction = 1 if delta_h > math.log(0.8) else -1
        for _ in range(100):
            pt = _Point(z, self.sample_momentum(), g, lp)
            h0 = self.hamiltonian(pt)
            new = self.leapfrog(pt, eps)
            delta_h = h0 - self.hamiltonian(new)
            if direction == 1 and not delta_h > math.log(0.8):
                break
            if direction == -1 and not delta_h < math.log(0.8):
                break
            eps = eps * 2.0 if direction == 1 else eps / 2.0
            if eps > 1e7 or eps < 1e-10:
                break
        self.step_size = eps

    @staticmethod
    def _no_u_turn(p_sharp_minus, p_sharp_plus, rho) -> bool:
        return float(np.dot(p_sharp_plus, rho)) > 0 and float(np.dot(p_sharp_minus, rho)) > 0

    def _build_tree(self, depth, pt, h0, sign, stats):
        """Returns ``(valid, end_point, sample, log_weight, rho, p_sharp_beg, p_sharp_end, p_beg, p_end)``."""
        if depth == 0:
            new = self.leapfrog(pt, sign * self.step_size)
            h = self.hamiltonian(new)
            stats["n_leapfrog"] += 1
            err = h - h0
            if not math.isfinite(h) or err > DIVERGENCE_THRESHOLD:
                stats["divergent"] = True
                return (False, new, new, -math.inf, None, None, None, None, None)
            stats["sum_metro"] += 1.0 if err < 0 else math.exp(-err)
            p_sharp = self.velocity(new.p)
            return (True, new, new, -err, new.p.copy(), p_sharp, p_sharp, new.p, new.p)

        left = self._build_tree(depth - 1, pt, h0, sign, stats)
        if not left[0]:
            return left
        right = self._build_tree(depth - 1, left[1], h0, sign, stats)
        if not right[0]:
            return right
        _, _, s_left, w_left, rho_left, ps_beg, ps_left_end, p_beg, p_left_end = left
        _, end, s_right, w_right, rho_right, ps_right_beg, ps_end, p_right_beg, p_end = right
        w = np.logaddexp(w_left, w_right)
        sample = s_right if self.rng.uniform() < math.exp(w_right - w) else s_left
        rho = rho_left + rho_right
        valid = self._no_u_turn(ps_beg, ps_end, rho)
        valid = valid and self._no_u_turn(ps_beg, ps_right_beg, rho_left + p_right_beg)
        valid = valid and self._no_u_turn(ps_left_end, ps_end, rho_right + p_left_end)
        return (valid, end, sample, w, rho, ps_beg, ps_end, p_beg, p_end)

    def transition(self, z, lp, g):
        p0 = self.sample_momentum()
        start = _Point(z, p0, g, lp)
        h0 = self.hamiltonian(start)
        fwd = bck = start
        ps_fwd = ps_bck = self.velocity(p0)
        p_fwd = p_bck = p0
        rho = p0.copy()
        log_w = 0.0
        sample = start
        stats = {"n_leapfrog": 0, "sum_metro": 0.0, "divergent": False}
        depth = 0
        while depth < self.max_tree_depth:
            if self.rng.uniform() > 0.5:
                res = self._build_tree(depth, fwd, h0, 1.0, stats)
                valid, fwd, prop, w_sub, rho_sub, ps_sub_beg, ps_fwd_new, p_sub_beg, p_fwd_new = res
                if not valid:
                    break
                rho_ext_a = rho + p_sub_beg
                ps_join_a, ps_join_b = ps_fwd, ps_sub_beg
                rho_ext_b = rho_sub + p_fwd
                ps_fwd, p_fwd = ps_fwd_new, p_fwd_new
                minus, plus = ps_bck, ps_fwd
                # joins: old tree end (fwd side) with new subtree beginning
                extra = self._no_u_turn(ps_bck, ps_join_b, rho_ext_a) and self._no_u_turn(
                    ps_join_a, ps_fwd, rho_ext_b
                )
            else:
                res = self._build_tree(depth, bck, h0, -1.0, stats)
                valid, bck, prop, w_sub, rho_sub, ps_sub_beg, ps_bck_new, p_sub_beg, p_bck_new = res
                if not valid:
                    break
                rho_ext_a = rho + p_sub_beg
                ps_join_a, ps_join_b = ps_bck, ps_sub_beg
                rho_ext_b = rho_sub + p_bck
                ps_bck, p_bck = ps_bck_new, p_bck_new
                minus, plus = ps_bck, ps_fwd
                extra = self._no_u_turn(ps_join_b, ps_fwd, rho_ext_a) and self._no_u_turn(
                    ps_bck, ps_join_a, rho_ext_b
                )
            depth += 1
            if w_sub > log_w or self.rng.uniform() < math.exp(w_sub - log_w):
                sample = prop
            log_w = float(np.logaddexp(log_w, w_sub))
            rho = rho + rho_sub
            if not (self._no_u_turn(minus, plus, rho) and extra):
                break
        n = stats["n_leapfrog"]
        accept = stats["sum_metro"] / n if n else 0.0
        return sample, {
            "accept_stat": accept,
            "tree_depth": depth,
            "n_leapfrog": n,
            "divergent": stats["divergent"],
            "energy_error": self.hamiltonian(sample) - h0,
        }


# --------------------------------------------------------------------------
# chains


def chain_rng(seed: int, chain: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(chain)])))


def run_chain(log_density: LogDensity, z0: np.ndarray, config: SamplerConfig, chain: int) -> dict:
    rng = chain_rng(config.seed, chain)
    z = np.asarray(z0, dtype=float).copy()
    dim = z.size
    lp, g = log_density(z)
    if not math.isfinite(lp) or not np.all(np.isfinite(g)):
        raise SamplerError(f"chain {chain}: non-finite log density or gradient at the initial point")
    nuts = NUTS(log_density, dim, rng, config.max_tree_depth)
    n_warm = config.warmup_per_chain
    n_iter = config.iter_per_chain
    if n_warm > 0:
        nuts.find_reasonable_step_size(z, lp, g)
    adapter = DualAveraging(nuts.step_size, config.target_accept)
    init_buf, term_buf, ends = warmup_windows(n_warm)
    window_idx = 0
    estimator = WelfordCovariance if config.metric == "dense" else WelfordVariance
    welford = estimator(dim)

    keep = n_iter - n_warm
    out_z = np.empty((keep, dim))
    out = {k: np.empty(keep) for k in ("lp", "accept_stat", "tree_depth", "n_leapfrog", "energy_error", "step_size")}
    out["divergent"] = np.zeros(keep, dtype=bool)
    n_div_warm = 0

    for it in range(n_iter):
        if it % 100 == 0:
            log.debug("chain %d iteration %d/%d step %.3g", chain, it, n_iter, nuts.step_size)
        point, info = nuts.transition(z, lp, g)
        z, lp, g = point.z, point.lp, point.g
        if it < n_warm:
            n_div_warm += info["divergent"]
            nuts.step_size = adapter.update(info["accept_stat"])
            if window_idx < len(ends) and it >= init_buf:
                welford.add(z)
                if it + 1 == ends[window_idx]:
                    nuts.set_inv_metric(welford.regularized())
                    welford = estimator(dim)
                    window_idx += 1
                    nuts.find_reasonable_step_size(z, lp, g)
                    adapter.restart(nuts.step_size)
            if it + 1 == n_warm:
                nuts.step_size = adapter.final_step_size
                if n_div_warm == n_warm:
                    raise SamplerError(
                        f"chain {chain}: every warmup transition diverged "
                        f"(final step size {nuts.step_size:.3g}); check the model parameterisation"
                    )
        else:
            k = it - n_warm
            out_z[k] = z
            out["lp"][k] = lp
            out["step_size"][k] = nuts.step_size
            out["divergent"][k] = info["divergent"]
            for key in ("accept_stat", "tree_depth", "n_leapfrog", "energy_error"):
                out[key][k] = info[key]
    out["z"] = out_z
    out["inv_metric"] = nuts.inv_metric
    log.debug("chain %d done: step %.3g, mean depth %.2f", chain, nuts.step_size, np.mean(out["tree_depth"]) if keep else 0)
    return out


def _run_chain_star(args):
    return run_chain(*args)


def default_workers() -> int:
    return max(1, int(os.environ.get("SEIIRD_WORKERS", "1")))


def sample(
    log_density: LogDensity,
    config: SamplerConfig,
    inits: Sequence[np.ndarray],
    names: Sequence[str] | None = None,
    constrain: Callable[[np.ndarray], np.ndarray] | None = None,
    workers: int | None = None,
) -> PosteriorDraws:
    """Run ``config.n_chains`` chains from the unconstrained ``inits``.

    ``constrain`` maps unconstrained rows to the reported parameter scale.
    Output is identical whatever the number of workers.
    """
    if len(inits) != config.n_chains:
        raise ValueError(f"need {config.n_chains} initial points, got {len(inits)}")
    workers = default_workers() if workers is None else workers
    jobs = [(log_density, inits[c], config, c) for c in range(config.n_chains)]
    if workers > 1 and config.n_chains > 1:
        with ProcessPoolExecutor(max_workers=min(workers, config.n_chains)) as pool:
            results = list(pool.map(_run_chain_star, jobs))
    else:
        results = [run_chain(*job) for job in jobs]
    z = np.concatenate([r["z"] for r in results])
    params = np.array([constrain(row) for row in z]) if constrain is not None else z
    dim = z.shape[1]
    names = tuple(names) if names is not None else tuple(f"x{i}" for i in range(dim))
    cat = lambda k: np.concatenate([r[k] for r in results])  # noqa: E731
    return PosteriorDraws(
        names=names,
        params=params,
        chain=np.concatenate([np.full(len(r["lp"]), c) for c, r in enumerate(results)]),
        lp=cat("lp"),
        divergent=cat("divergent"),
        tree_depth=cat("tree_depth").astype(int),
        step_size=cat("step_size"),
        accept_stat=cat("accept_stat"),
        energy_error=cat("energy_error"),
        n_leapfrog=cat("n_leapfrog").astype(int),
    )
