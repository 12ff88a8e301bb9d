import os

import numpy as np
import pytest

from seiird.priors import TABLE_A1
from seiird.simstudy import simulate_dataset

DESK_CACHE = os.path.join(os.path.dirname(__file__), "..", "results", "desk_study", "cache")


def full_rhs(t, x, beta, gamma, nu_e, nu_p, eta, delta):
    """All eleven equations written out independently of the package kernels."""
    S, E, Ie, Ip = x[0], x[1], x[2], x[3]
    lse = beta * (Ie + delta * Ip) * S
    leie = gamma * E
    lieip = nu_e * Ie
    lipr = (1 - eta) * nu_p * Ip
    lipd = eta * nu_p * Ip
    return [-lse, lse - leie, leie - lieip, lieip - lipr - lipd, lipr, lipd, lse, leie, lieip, lipr, lipd]


@pytest.fixture(scope="session")
def truth():
    return TABLE_A1.as_array()


@pytest.fixture(scope="session")
def sim_data(truth):
    return simulate_dataset(truth, seed=5)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE: list[str] = []


def record_criterion(number: int, ok: bool, detail: str):
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
