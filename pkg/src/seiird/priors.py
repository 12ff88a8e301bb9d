"""Prior distributions, unconstrained transforms and prior propagation."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np
from scipy import special, stats

from .model import ODE_PARAMS, integrate_theta, DELTA

PARAM_NAMES = (
    "S0",
    "I_tilde0",
    "Ie_tilde0",
    "R0",
    "inv_gamma",
    "inv_nu_e",
    "inv_nu_p",
    "eta",
    "rho",
    "phi",
    "alpha0",
    "alpha1",
    "kappa",
)
NO_TESTS_PARAM_NAMES = PARAM_NAMES[:10] + ("rho_c", "phi_c")

UNIT_PARAMS = frozenset({"S0", "I_tilde0", "Ie_tilde0", "eta", "rho", "alpha1", "rho_c"})


@dataclass(frozen=True)
class ParamVector:
    S0: float
    I_tilde0: float
    Ie_tilde0: float
    R0: float
    inv_gamma: float
    inv_nu_e: float
    inv_nu_p: float
    eta: float
    rho: float
    phi: float
    alpha0: float
    alpha1: float
    kappa: float

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, f.name) for f in fields(self)], dtype=float)

    @classmethod
    def from_array(cls, values) -> "ParamVector":
        return cls(*(float(v) for v in values))

    def in_support(self) -> bool:
        return bool(np.all(np.isfinite(self.as_array()))) and all(
            _in_support(name, getattr(self, name)) for name in PARAM_NAMES
        )


def _in_support(name, value) -> bool:
    if name in UNIT_PARAMS:
        return 0.0 < value < 1.0
    return value > 0.0


# Values used to simulate the validation data sets.
TABLE_A1 = ParamVector(
    S0=1 - 3.1e-3,
    I_tilde0=0.69,
    Ie_tilde0=0.44,
    R0=0.92,
    inv_gamma=0.97,
    inv_nu_e=0.96,
    inv_nu_p=0.96,
    eta=0.0092,
    rho=0.83,
    phi=1 / 0.38**2,
    alpha0=3.87,
    alpha1=0.83,
    kappa=1 / 0.037**2,
)


# --------------------------------------------------------------------------
# prior families


@dataclass(frozen=True)
class Prior:
    """A univariate prior.

    Families:

    ``beta(a, b)``, ``lognormal(mu, sigma)``, ``truncnormal(mu, sigma)``
    (truncated below at zero), ``exp_inv_sqrt(rate)`` (``1/sqrt(x)`` is
    exponential) and ``flat`` (constant density on the support; improper for
    positive parameters and cannot be sampled).
    """

    family: str
    params: tuple[float, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "params", tuple(float(p) for p in self.params))
        need = {"beta": 2, "lognormal": 2, "truncnormal": 2, "exp_inv_sqrt": 1, "flat": 0}
        if self.family not in need:
            raise ValueError(f"unknown prior family {self.family!r}")
        if len(self.params) != need[self.family]:
            raise ValueError(f"{self.family} takes {need[self.family]} hyperparameters, got {len(self.params)}")
        if self.family != "flat" and self.family != "lognormal" and self.family != "truncnormal":
            if any(p <= 0 for p in self.params):
                raise ValueError(f"{self.family} hyperparameters must be positive")
        if self.family in ("lognormal", "truncnormal") and self.params[1] <= 0:
            raise ValueError(f"{self.family} scale must be positive")

    def logpdf(self, x: float) -> float:
        f, p = self.family, self.params
        if f == "beta":
            if not 0.0 < x < 1.0:
                return -math.inf
            a, b = p
            return (a - 1.0) * math.log(x) + (b - 1.0) * math.log1p(-x) - special.betaln(a, b)
        if x <= 0.0:
            return -math.inf
        if f == "lognormal":
            mu, s = p
            lx = math.log(x)
            return -lx - math.log(s) - 0.5 * math.log(2 * math.pi) - 0.5 * ((lx - mu) / s) ** 2
        if f == "truncnormal":
            mu, s = p
            return (
                -math.log(s)
                - 0.5 * math.log(2 * math.pi)
                - 0.5 * ((x - mu) / s) ** 2
                - special.log_ndtr(mu / s)
            )
        if f == "exp_inv_sqrt":
            (rate,) = p
            # density of u = x**-0.5 times |du/dx| = 0.5 * x**-1.5
            return math.log(rate) - rate / math.sqrt(x) + math.log(0.5) - 1.5 * math.log(x)
        return 0.0

    def dlogpdf(self, x: float) -> float:
        f, p = self.family, self.params
        if f == "beta":
            a, b = p
            return (a - 1.0) / x - (b - 1.0) / (1.0 - x)
        if f == "lognormal":
            mu, s = p
            return -(1.0 + (math.log(x) - mu) / s**2) / x
        if f == "truncnormal":
            mu, s = p
            return -(x - mu) / s**2
        if f == "exp_inv_sqrt":
            (rate,) = p
            return 0.5 * rate * x**-1.5 - 1.5 / x
        return 0.0

    def sample(self, rng: np.random.Generator, size=None):
        f, p = self.family, self.params
        if f == "beta":
            return rng.beta(p[0], p[1], size)
        if f == "lognormal":
            return np.exp(rng.normal(p[0], p[1], size))
        if f == "truncnormal":
            lo = -p[0] / p[1]
            return stats.truncnorm.rvs(lo, np.inf, loc=p[0], scale=p[1], size=size, random_state=rng)
        if f == "exp_inv_sqrt":
            u = rng.exponential(1.0 / p[0], size)
            return 1.0 / u**2
        raise ValueError("a flat prior cannot be sampled")

    def to_dict(self) -> dict:
        return {"family": self.family, "params": list(self.params)}


TABLE_1 = {
    "S0": Prior("beta", (983, 2.7)),
    "I_tilde0": Prior("beta", (41.3, 17.26)),
    "Ie_tilde0": Prior("beta", (24.43, 27.02)),
    "R0": Prior("lognormal", (-0.25, 0.7)),
    "inv_gamma": Prior("lognormal", (0.0, 0.22)),
    "inv_nu_e": Prior("lognormal", (0.0, 0.22)),
    "inv_nu_p": Prior("lognormal", (0.0, 0.22)),
    "eta": Prior("beta", (1.5, 200)),
    "rho": Prior("beta", (8, 2)),
    "phi": Prior("exp_inv_sqrt", (1.0,)),
    "alpha0": Prior("truncnormal", (4.0, 2.0)),
    "alpha1": Prior("beta", (3, 1)),
    "kappa": Prior("exp_inv_sqrt", (1.0,)),
}

NO_TESTS_PRIORS = {
    "rho_c": Prior("beta", (5.62, 42.57)),
    "phi_c": Prior("exp_inv_sqrt", (1.0,)),
}


class PriorSpec:
    """One prior per parameter name, in a fixed parameter order."""

    def __init__(self, priors: dict[str, Prior], names=PARAM_NAMES):
        missing = [n for n in names if n not in priors]
        extra = [n for n in priors if n not in names]
        if missing or extra:
            raise ValueError(f"prior spec mismatch: missing {missing}, unexpected {extra}")
        self.names = tuple(names)
        self.priors = {n: priors[n] for n in names}

    @classmethod
    def default(cls, model: str = "test_aware") -> "PriorSpec":
        if model == "test_aware":
            return cls(dict(TABLE_1))
        if model == "no_tests":
            base = {k: v for k, v in TABLE_1.items() if k in NO_TESTS_PARAM_NAMES}
            return cls({**base, **NO_TESTS_PRIORS}, NO_TESTS_PARAM_NAMES)
        raise ValueError(f"unknown model {model!r}")

    def with_overrides(self, overrides: dict[str, Prior]) -> "PriorSpec":
        return PriorSpec({**self.priors, **overrides}, self.names)

    def __getitem__(self, name: str) -> Prior:
        return self.priors[name]

    def to_dict(self) -> dict:
        return {n: p.to_dict() for n, p in self.priors.items()}

    @classmethod
    def from_dict(cls, d: dict, model: str = "test_aware") -> "PriorSpec":
        base = cls.default(model)
        return base.with_overrides({n: Prior(v["family"], tuple(v.get("params", ()))) for n, v in d.items()})

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return np.column_stack([self.priors[n].sample(rng, size) for n in self.names])


def log_prior(theta, spec: PriorSpec) -> float:
    """Sum of independent log prior densities; ``-inf`` outside the support."""
    values = theta.as_array() if isinstance(theta, ParamVector) else np.asarray(theta, dtype=float)
    total = 0.0
    for name, x in zip(spec.names, values):
        lp = spec.priors[name].logpdf(float(x))
        if lp == -math.inf:
            return -math.inf
        total += lp
    return total


def log_prior_grad(theta, spec: PriorSpec) -> np.ndarray:
    values = np.asarray(theta, dtype=float)
    return np.array([spec.priors[n].dlogpdf(float(x)) for n, x in zip(spec.names, values)])


# --------------------------------------------------------------------------
# unconstrained transforms


def _unit_mask(names) -> np.ndarray:
    return np.array([n in UNIT_PARAMS for n in names])


def to_unconstrained(theta, names=PARAM_NAMES) -> np.ndarray:
    values = theta.as_array() if isinstance(theta, ParamVector) else np.asarray(theta, dtype=float)
    unit = _unit_mask(names)
    return np.where(unit, special.logit(np.where(unit, values, 0.5)), np.log(np.where(unit, 1.0, values)))


def from_unconstrained(z, names=PARAM_NAMES) -> tuple[np.ndarray, float]:
    """Map ``z`` to the constrained scale; return ``(theta, log|d theta / d z|)``."""
    z = np.asarray(z, dtype=float)
    unit = _unit_mask(names)
    theta = np.where(unit, special.expit(z), np.exp(z))
    # log(sigmoid'(z)) = -softplus(-z) - softplus(z)
    log_jac = np.where(unit, -np.logaddexp(0.0, -z) - np.logaddexp(0.0, z), z)
    return theta, float(np.sum(log_jac))


def transform_jacobian(theta, names=PARAM_NAMES) -> tuple[np.ndarray, np.ndarray]:
    """Diagonal ``d theta / d z`` and the gradient of the log-Jacobian with respect to ``z``."""
    theta = np.asarray(theta, dtype=float)
    unit = _unit_mask(names)
    dtheta = np.where(unit, theta * (1.0 - theta), theta)
    dlogjac = np.where(unit, 1.0 - 2.0 * theta, 1.0)
    return dtheta, dlogjac


# --------------------------------------------------------------------------
# method-of-moments propagation of initial-state priors


class MomentError(ValueError):
    pass


def beta_from_moments(mean: float, var: float) -> tuple[float, float]:
    """Beta shape parameters matching a mean and variance."""
    if not 0.0 < mean < 1.0:
        raise MomentError(f"mean {mean} outside (0, 1)")
    if var <= 0.0:
        raise MomentError("zero variance: a Beta prior cannot be matched; inflate the variance")
    if var >= mean * (1.0 - mean):
        raise MomentError(
            f"variance {var:.4g} >= mean*(1-mean) = {mean * (1 - mean):.4g}; "
            "cap the variance below this bound before matching a Beta prior"
        )
    k = mean * (1.0 - mean) / var - 1.0
    return mean * k, (1.0 - mean) * k


def initial_fraction_functionals(values: np.ndarray) -> np.ndarray:
    """``(S, I_tilde, Ie_tilde)`` from rows of compartment values ``S, E, Ie, Ip, ...``."""
    S, Ie, Ip = values[..., 0], values[..., 2], values[..., 3]
    infected = 1.0 - S
    return np.stack([S, (Ie + Ip) / infected, Ie / (Ie + Ip)], axis=-1)


def propagate_initial_priors(draws, at_time: float, delta: float = DELTA) -> dict[str, Prior]:
    """Beta priors for the next period's initial fractions, by moment matching.

    ``draws`` is any object with ``params`` (rows of constrained parameters)
    and ``names``; ``at_time`` is in weeks from the start of the fitted period.
    """
    idx = [draws.names.index(n) for n in ODE_PARAMS]
    rows = []
    for theta in np.asarray(draws.params)[:, idx]:
        raw = integrate_theta(theta, np.array([0.0, at_time]) if at_time > 0 else np.array([0.0]), delta)
        rows.append(raw[-1, 0, :])
    funcs = initial_fraction_functionals(np.array(rows))
    out = {}
    for j, name in enumerate(("S0", "I_tilde0", "Ie_tilde0")):
        col = funcs[:, j]
        a, b = beta_from_moments(float(np.mean(col)), float(np.var(col, ddof=1)))
        out[name] = Prior("beta", (a, b))
    return out


def prior_summary(prior: Prior, display=None, n: int = 1_000_000, seed: int = 0) -> np.ndarray:
    """Monte Carlo median and 5%/95% quantiles, optionally on a display scale."""
    x = prior.sample(np.random.default_rng(seed), n)
    if display is not None:
        x = display(x)
    return np.quantile(x, [0.5, 0.05, 0.95])
