"""Fitting a surveillance series: initialisation, sampling and diagnostics."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .diagnostics import Diagnostics, diagnostics
from .model import DELTA
from .posterior import Posterior
from .priors import PriorSpec, to_unconstrained
from .sampler import PosteriorDraws, SamplerConfig, SamplerError, chain_rng, sample
from .surveillance import SurveillanceSeries

log = logging.getLogger(__name__)

MAX_INIT_ATTEMPTS = 100


@dataclass
class FitResult:
    posterior: Posterior
    draws: PosteriorDraws
    config: SamplerConfig
    diagnostics: Diagnostics | None

    @property
    def model(self) -> str:
        return self.posterior.model


def initial_points(post: Posterior, config: SamplerConfig) -> list[np.ndarray]:
    """One prior draw per chain, redrawn until the log density is finite."""
    inits = []
    for c in range(config.n_chains):
        rng = chain_rng(config.seed, 10_000 + c)
        last = None
        for _ in range(MAX_INIT_ATTEMPTS):
            theta = np.array([post.priors[n].sample(rng) for n in post.names], dtype=float)
            z = to_unconstrained(theta, post.names)
            lp, g = post.log_density_and_grad(z)
            if math.isfinite(lp) and np.all(np.isfinite(g)):
                inits.append(z)
                break
            last = theta
        else:
            bad = [n for n, v in zip(post.names, last) if not np.isfinite(post.priors[n].logpdf(v))]
            raise SamplerError(
                f"chain {c}: no finite initial point in {MAX_INIT_ATTEMPTS} prior draws"
                + (f" (offending parameters: {bad})" if bad else "")
            )
    return inits


def fit(
    data: SurveillanceSeries,
    model: str = "test_aware",
    priors: PriorSpec | None = None,
    config: SamplerConfig | None = None,
    pop_size: float = 3.18e6,
    delta: float = DELTA,
    workers: int | None = None,
) -> FitResult:
    config = config or SamplerConfig()
    post = Posterior(data, model=model, priors=priors, pop_size=pop_size, delta=delta)
    inits = initial_points(post, config)
    draws = sample(post, config, inits, names=post.names, constrain=post.constrain, workers=workers)
    diag = None
    if config.n_chains >= 2 and len(draws) // config.n_chains >= 100:
        diag = diagnostics(draws)
    n_div = int(draws.divergent.sum())
    if n_div:
        log.warning("%d of %d retained transitions diverged", n_div, len(draws))
    return FitResult(post, draws, config, diag)
