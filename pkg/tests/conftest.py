import numpy as np
import pytest

from resweight.data import Dataset
from resweight.montecarlo import (
    COVARIATE_NAMES,
    assign_treatment,
    draw_covariates,
    gen_outcomes,
    rng_for,
)


def sim_dataset(seed, n=300, design="D1", outcome="O1", effects="homogeneous"):
    """One draw of the simulation DGP as a Dataset."""
    x = draw_covariates(n, rng_for(seed, 99, 0))
    z = assign_treatment(x, design, rng_for(seed, 99, 1))
    y0, y1 = gen_outcomes(x, outcome, effects, rng_for(seed, 99, 2))
    return Dataset(np.where(z == 1, y1, y0), z, x, COVARIATE_NAMES)


@pytest.fixture
def sim():
    return sim_dataset(11)


@pytest.fixture
def sim_het():
    return sim_dataset(12, effects="heterogeneous")


@pytest.fixture
def small():
    rng = np.random.default_rng(3)
    n = 80
    x = rng.normal(size=(n, 2))
    z = (x[:, 0] + rng.normal(size=n) > 0).astype(int)
    y = 1 + x @ [1.0, -0.5] + 0.7 * z + rng.normal(size=n)
    return Dataset(y, z, x)


_ACCEPTANCE = []


def record_criterion(number, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}"
    _ACCEPTANCE.append((number, line))
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_ACCEPTANCE, key=lambda t: t[0]):
        terminalreporter.write_line(line)
