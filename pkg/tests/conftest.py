from __future__ import annotations

import warnings

import numpy as np
import pytest

from dictstereo import brdf, render

warnings.filterwarnings("ignore", message=".*TBB.*")

# lines appended by the acceptance checks, echoed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def default_dictionary():
    return brdf.build_parametric_dictionary(brdf.default_parametric_specs())


@pytest.fixture(scope="session")
def small_dictionary():
    specs = [
        {"model": "lambertian", "params": {"albedo": 1.0}, "name": "lam"},
        {"model": "ward", "params": {"rho_d": 0.5, "rho_s": 0.5, "alpha": 0.1}, "name": "w1"},
        {"model": "ward", "params": {"rho_d": 0.5, "rho_s": 0.5, "alpha": 0.3}, "name": "w3"},
    ]
    return brdf.build_parametric_dictionary(specs)


@pytest.fixture(scope="session")
def rig40():
    return render.random_rig(40, 5)


@pytest.fixture(scope="session")
def random_table():
    rng = np.random.default_rng(1234)
    return brdf.Brdf(rng.uniform(0.0, 2.0, (1,) + brdf.TABLE_SHAPE), name="noise")


def random_unit(rng, n, upper=True):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    if upper:
        v[:, 2] = np.abs(v[:, 2])
    return v
