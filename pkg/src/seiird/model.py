"""Six-compartment SEIIRD transmission model.

Compartments are population fractions ``S, E, Ie, Ip, R, D``; alongside them
we integrate the cumulative transition fractions ``N_SE, N_EIe, N_IeIp,
N_IpR, N_IpD``. Time is measured in weeks.

The integrator is a fixed-step classical RK4. Forward sensitivities are
obtained by integrating the variational equations with the same scheme, which
for explicit Runge-Kutta methods equals the exact derivative of the discrete
solution map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numba import njit

DELTA = 0.8
MAX_STEP = 0.01

STATE_NAMES = ("S", "E", "Ie", "Ip", "R", "D")
CUMULATIVE_NAMES = ("N_SE", "N_EIe", "N_IeIp", "N_IpR", "N_IpD")
ALL_NAMES = STATE_NAMES + CUMULATIVE_NAMES
N_STATE = 11

# Parameters the ODE solution depends on, in the column order of the
# sensitivity array returned by the kernel.
ODE_PARAMS = ("S0", "I_tilde0", "Ie_tilde0", "R0", "inv_gamma", "inv_nu_e", "inv_nu_p", "eta")

IDX = {name: i for i, name in enumerate(ALL_NAMES)}


class IntegrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class CompartmentState:
    S: float
    E: float
    Ie: float
    Ip: float
    R: float = 0.0
    D: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.S, self.E, self.Ie, self.Ip, self.R, self.D])


@dataclass(frozen=True)
class RateParams:
    """Transition rates, all per week except ``delta`` and ``eta``."""

    beta: float
    gamma: float
    nu_e: float
    nu_p: float
    eta: float
    delta: float = DELTA

    def __post_init__(self):
        if min(self.beta, self.gamma, self.nu_e, self.nu_p) < 0:
            raise ValueError("rates must be non-negative")
        if not 0.0 <= self.delta <= 1.0:
            raise ValueError(f"delta must lie in [0, 1], got {self.delta}")
        if not 0.0 <= self.eta < 1.0:
            raise ValueError(f"eta must lie in [0, 1), got {self.eta}")

    @classmethod
    def from_durations(cls, R0, inv_gamma, inv_nu_e, inv_nu_p, eta, delta=DELTA):
        beta = beta_from_R0(R0, inv_nu_e, inv_nu_p, delta)
        return cls(beta, 1.0 / inv_gamma, 1.0 / inv_nu_e, 1.0 / inv_nu_p, eta, delta)


@dataclass(frozen=True)
class InitParams:
    S0: float
    I_tilde0: float
    Ie_tilde0: float

    def __post_init__(self):
        for name in ("S0", "I_tilde0", "Ie_tilde0"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")


@dataclass
class Trajectory:
    """Solution on a time grid.

    ``values`` has shape ``(n_times, 11)`` with columns ``ALL_NAMES``.
    ``sensitivities``, when present, has shape ``(n_times, 11, n_wrt)``.
    """

    times: np.ndarray
    values: np.ndarray
    sensitivities: np.ndarray | None = None
    wrt: tuple[str, ...] = field(default_factory=tuple)

    @property
    def states(self) -> np.ndarray:
        return self.values[:, :6]

    @property
    def cumulative(self) -> np.ndarray:
        return self.values[:, 6:]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[:, IDX[name]]

    def sensitivity(self, name: str, wrt: str) -> np.ndarray:
        if self.sensitivities is None:
            raise ValueError("trajectory was solved without sensitivities")
        return self.sensitivities[:, IDX[name], self.wrt.index(wrt)]


def transition_rates(x: CompartmentState, p: RateParams) -> tuple[float, float, float, float, float]:
    """Return ``(lambda_SE, lambda_EIe, lambda_IeIp, lambda_IpR, lambda_IpD)``."""
    lam_se = p.beta * (x.Ie + p.delta * x.Ip) * x.S
    lam_eie = p.gamma * x.E
    lam_ieip = p.nu_e * x.Ie
    lam_ipr = (1.0 - p.eta) * p.nu_p * x.Ip
    lam_ipd = p.eta * p.nu_p * x.Ip
    return lam_se, lam_eie, lam_ieip, lam_ipr, lam_ipd


def beta_from_R0(R0: float, inv_nu_e: float, inv_nu_p: float, delta: float = DELTA) -> float:
    """Infection rate giving basic reproduction number ``R0``.

    ``R0 = beta * (1/nu_e + delta/nu_p)`` is the dominant eigenvalue of the
    next-generation matrix at the disease-free equilibrium.
    """
    if inv_nu_e <= 0 or inv_nu_p <= 0:
        raise ValueError("mean infectious durations must be positive")
    return R0 / (inv_nu_e + delta * inv_nu_p)


def R0_from_beta(beta: float, inv_nu_e: float, inv_nu_p: float, delta: float = DELTA) -> float:
    return beta * (inv_nu_e + delta * inv_nu_p)


def initial_state(init: InitParams) -> CompartmentState:
    infected = 1.0 - init.S0
    return CompartmentState(
        S=init.S0,
        E=(1.0 - init.I_tilde0) * infected,
        Ie=init.Ie_tilde0 * init.I_tilde0 * infected,
        Ip=(1.0 - init.Ie_tilde0) * init.I_tilde0 * infected,
    )


# --------------------------------------------------------------------------
# numba kernels
#
# The augmented state is a (1 + n_sens, 4) array of the dynamic compartments
# S, E, Ie, Ip: row 0 holds the solution, row 1 + j its derivative with
# respect to ODE_PARAMS[j]. Rates are passed as (beta, gamma, nu_e, nu_p, eta,
# delta) together with a (5, n_sens) matrix of the partial derivatives of
# (beta, gamma, nu_e, nu_p, eta) per column.
#
# R, D and the cumulative transitions are linear functionals of the dynamic
# compartments (each is an integral of flows that telescope), and RK4
# preserves linear invariants exactly, so they are recovered on the output
# grid from the identities below instead of being stepped. The result equals
# stepping all 11 equations, at a third of the cost.


@njit(cache=True, fastmath=True, error_model="numpy")
def _rhs(y, rates, drates, out):
    beta, gamma, nu_e, nu_p, delta = rates[0], rates[1], rates[2], rates[3], rates[5]
    S, E, Ie, Ip = y[0, 0], y[0, 1], y[0, 2], y[0, 3]
    force = Ie + delta * Ip
    l_se = beta * force * S
    l_eie = gamma * E
    l_ieip = nu_e * Ie
    out[0, 0] = -l_se
    out[0, 1] = l_se - l_eie
    out[0, 2] = l_eie - l_ieip
    out[0, 3] = l_ieip - nu_p * Ip
    for j in range(1, y.shape[0]):
        sS, sE, sIe, sIp = y[j, 0], y[j, 1], y[j, 2], y[j, 3]
        d_se = beta * ((sIe + delta * sIp) * S + force * sS) + drates[0, j - 1] * force * S
        d_eie = gamma * sE + drates[1, j - 1] * E
        d_ieip = nu_e * sIe + drates[2, j - 1] * Ie
        out[j, 0] = -d_se
        out[j, 1] = d_se - d_eie
        out[j, 2] = d_eie - d_ieip
        out[j, 3] = d_ieip - nu_p * sIp - drates[3, j - 1] * Ip


@njit(cache=True, error_model="numpy")
def _expand(y, y0, eta, deta, out):
    """Fill the 11 output columns of every row from the dynamic compartments.

    ``q`` is the cumulative outflow from ``Ip``; deaths take the share ``eta``.
    """
    q0 = 0.0
    for j in range(y.shape[0]):
        S, E, Ie, Ip = y[j, 0], y[j, 1], y[j, 2], y[j, 3]
        n_se = y0[j, 0] - S
        n_eie = n_se - (E - y0[j, 1])
        n_ieip = n_eie - (Ie - y0[j, 2])
        q = n_ieip - (Ip - y0[j, 3])
        if j == 0:
            q0 = q
            n_ipd = eta * q
        else:
            n_ipd = eta * q + deta[j - 1] * q0
        out[j, 0] = S
        out[j, 1] = E
        out[j, 2] = Ie
        out[j, 3] = Ip
        out[j, 4] = q - n_ipd
        out[j, 5] = n_ipd
        out[j, 6] = n_se
        out[j, 7] = n_eie
        out[j, 8] = n_ieip
        out[j, 9] = q - n_ipd
        out[j, 10] = n_ipd


@njit(cache=True, fastmath=True, error_model="numpy")
def _integrate(y0, rates, drates, times, max_step):
    n_t = times.shape[0]
    rows = y0.shape[0]
    eta = rates[4]
    deta = drates[4]
    out = np.zeros((n_t, rows, 11))
    y = y0.copy()
    _expand(y, y0, eta, deta, out[0])
    k1 = np.empty_like(y)
    k2 = np.empty_like(y)
    k3 = np.empty_like(y)
    k4 = np.empty_like(y)
    tmp = np.empty_like(y)
    for i in range(1, n_t):
        span = times[i] - times[i - 1]
        n_sub = int(math.ceil(span / max_step - 1e-9))
        if n_sub < 1:
            n_sub = 1
        h = span / n_sub
        for _ in range(n_sub):
            _rhs(y, rates, drates, k1)
            for a in range(rows):
                for b in range(4):
                    tmp[a, b] = y[a, b] + 0.5 * h * k1[a, b]
            _rhs(tmp, rates, drates, k2)
            for a in range(rows):
                for b in range(4):
                    tmp[a, b] = y[a, b] + 0.5 * h * k2[a, b]
            _rhs(tmp, rates, drates, k3)
            for a in range(rows):
                for b in range(4):
                    tmp[a, b] = y[a, b] + h * k3[a, b]
            _rhs(tmp, rates, drates, k4)
            for a in range(rows):
                for b in range(4):
                    y[a, b] += h / 6.0 * (k1[a, b] + 2.0 * k2[a, b] + 2.0 * k3[a, b] + k4[a, b])
        _expand(y, y0, eta, deta, out[i])
    return out


def _ode_inputs(theta_ode: np.ndarray, delta: float, with_sens: bool):
    """Build initial augmented state and rate arrays from the 8 ODE parameters."""
    S0, I0, Ie0, R0, g, a, b, eta = (float(v) for v in theta_ode)
    inf = 1.0 - S0
    denom = a + delta * b
    beta = R0 / denom
    rates = np.array([beta, 1.0 / g, 1.0 / a, 1.0 / b, eta, delta])
    n_sens = len(ODE_PARAMS) if with_sens else 0
    y0 = np.zeros((1 + n_sens, 4))
    y0[0, :4] = (S0, (1.0 - I0) * inf, Ie0 * I0 * inf, (1.0 - Ie0) * I0 * inf)
    drates = np.zeros((5, max(n_sens, 1)))
    if with_sens:
        # d x0 / d(S0, I_tilde0, Ie_tilde0)
        y0[1, :4] = (1.0, -(1.0 - I0), -Ie0 * I0, -(1.0 - Ie0) * I0)
        y0[2, :4] = (0.0, -inf, Ie0 * inf, (1.0 - Ie0) * inf)
        y0[3, :4] = (0.0, 0.0, I0 * inf, -I0 * inf)
        # d(beta, gamma, nu_e, nu_p, eta) / d(R0, inv_gamma, inv_nu_e, inv_nu_p, eta)
        drates[0, 3] = 1.0 / denom
        drates[0, 5] = -R0 / denom**2
        drates[0, 6] = -R0 * delta / denom**2
        drates[1, 4] = -1.0 / g**2
        drates[2, 5] = -1.0 / a**2
        drates[3, 6] = -1.0 / b**2
        drates[4, 7] = 1.0
    return y0, rates, drates


def integrate_theta(
    theta_ode: np.ndarray,
    times: np.ndarray,
    delta: float = DELTA,
    with_sens: bool = False,
    max_step: float = MAX_STEP,
) -> np.ndarray:
    """Integrate from the 8 ODE parameters (order ``ODE_PARAMS``).

    Returns the raw augmented array of shape ``(n_times, 1 + n_sens, 11)``.
    """
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or times.size < 1:
        raise IntegrationError("time grid must be a non-empty 1-d array")
    if np.any(np.diff(times) <= 0):
        raise IntegrationError("time grid must be strictly increasing")
    if not max_step > 0:
        raise IntegrationError(f"max_step must be positive, got {max_step}")
    y0, rates, drates = _ode_inputs(theta_ode, delta, with_sens)
    out = _integrate(y0, rates, drates, times, max_step)
    if not np.all(np.isfinite(out)):
        bad = int(np.argmax(~np.all(np.isfinite(out), axis=(1, 2))))
        raise IntegrationError(
            f"non-finite solution at t={times[bad]:.4g} for parameters {dict(zip(ODE_PARAMS, theta_ode))}"
        )
    return out


def _theta_ode(init: InitParams, p: RateParams) -> np.ndarray:
    R0 = R0_from_beta(p.beta, 1.0 / p.nu_e, 1.0 / p.nu_p, p.delta)
    return np.array(
        [init.S0, init.I_tilde0, init.Ie_tilde0, R0, 1.0 / p.gamma, 1.0 / p.nu_e, 1.0 / p.nu_p, p.eta]
    )


def _check_rates(p: RateParams):
    if min(p.gamma, p.nu_e, p.nu_p) <= 0:
        raise IntegrationError("gamma, nu_e and nu_p must be positive to integrate")


def solve(init: InitParams, p: RateParams, t_grid: Sequence[float], max_step: float = MAX_STEP) -> Trajectory:
    """Integrate the prevalence and cumulative-transition equations on ``t_grid``.

    The first grid point is the initial time.
    """
    _check_rates(p)
    times = np.asarray(t_grid, dtype=float)
    raw = integrate_theta(_theta_ode(init, p), times, p.delta, with_sens=False, max_step=max_step)
    return Trajectory(times=times, values=raw[:, 0, :])


def solve_with_sensitivities(
    init: InitParams,
    p: RateParams,
    t_grid: Sequence[float],
    wrt: Sequence[str] = ODE_PARAMS,
    max_step: float = MAX_STEP,
) -> Trajectory:
    """As :func:`solve`, also returning derivatives with respect to ``wrt``.

    ``wrt`` entries are taken from ``ODE_PARAMS``; durations are
    differentiated on the inverse-rate scale and ``R0`` is held as the
    primary transmission parameter (``beta`` adjusts with the durations).
    """
    _check_rates(p)
    unknown = [w for w in wrt if w not in ODE_PARAMS]
    if unknown:
        raise ValueError(f"cannot differentiate with respect to {unknown}; choose from {ODE_PARAMS}")
    times = np.asarray(t_grid, dtype=float)
    raw = integrate_theta(_theta_ode(init, p), times, p.delta, with_sens=True, max_step=max_step)
    cols = [1 + ODE_PARAMS.index(w) for w in wrt]
    sens = np.transpose(raw[:, cols, :], (0, 2, 1))
    return Trajectory(times=times, values=raw[:, 0, :], sensitivities=sens, wrt=tuple(wrt))


def integrate_many(thetas: np.ndarray, times: np.ndarray, delta: float = DELTA, max_step: float = MAX_STEP) -> np.ndarray:
    """Solutions for many ODE parameter rows; returns ``(n_rows, n_times, 11)``."""
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))[:, : len(ODE_PARAMS)]
    times = np.asarray(times, dtype=float)
    if np.any(np.diff(times) <= 0):
        raise IntegrationError("time grid must be strictly increasing")
    out = np.empty((thetas.shape[0], times.size, N_STATE))
    for i, theta in enumerate(thetas):
        y0, rates, drates = _ode_inputs(theta, delta, False)
        out[i] = _integrate(y0, rates, drates, times, max_step)[:, 0, :]
    if not np.all(np.isfinite(out)):
        raise IntegrationError("non-finite solution for at least one parameter row")
    return out
