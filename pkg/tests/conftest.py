import numpy as np
import pytest

from bandgap import (
    HomogenizedProblem,
    LocalizedPotential,
    PeriodicPotential,
    build_expansion,
    effective_mass,
    find_band_edge,
    solve_homogenized,
)

# Characteristic values of y'' + (a - 2q cos 2t) y = 0, q = 5/pi^2, rescaled by pi^2:
# E_0(0) = pi^2 a_0(q), E_0(1/2) = pi^2 b_1(q) for V = 10 cos(2 pi x).
MATHIEU_E0_K0 = -1.2329185595350058
MATHIEU_E0_KHALF = 4.57251821590941


# one PASS/FAIL line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def record_criterion(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d}: {title} -- {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def V_ref():
    return PeriodicPotential.cosine(10.0, 1)


@pytest.fixture(scope="session")
def Q_down():
    return LocalizedPotential(1, "gaussian", depth=-2.0, width=1.0)


@pytest.fixture(scope="session")
def edge_low(V_ref):
    return find_band_edge(V_ref, 0, (0.0,))


@pytest.fixture(scope="session")
def edge_top(V_ref):
    return find_band_edge(V_ref, 0, (0.5,))


@pytest.fixture(scope="session")
def mass_low(edge_low):
    return effective_mass(edge_low)


@pytest.fixture(scope="session")
def reference_state(edge_low, mass_low, Q_down):
    problem = HomogenizedProblem(mass_low.inner, Q_down, scheme="spectral")
    pair = solve_homogenized(problem, 2)[0]
    return build_expansion(edge_low, pair, 4)


@pytest.fixture
def rng():
    return np.random.default_rng(7)
