import math

import numpy as np
import pytest
import scipy.sparse.linalg as spla

from bandgap.errors import MemoryBudgetError
from bandgap.homogenized import HomogenizedProblem, fit_box, solve_homogenized
from bandgap.lattice import LocalizedPotential, PeriodicPotential
from bandgap.validator import (
    DirectProblem,
    assemble_direct,
    averaging_check,
    domain_cells,
    find_gap_eigenvalues,
    fit_slope,
    gap_contains,
    rayleigh_quotient,
)

from conftest import MATHIEU_E0_K0, MATHIEU_E0_KHALF

NO_DEFECT = LocalizedPotential(1, "gaussian", depth=0.0)


def lowest(H, k=1, sigma=-100.0):
    return np.sort(spla.eigsh(H.tocsc(), k=k, sigma=sigma, which="LM")[0])


def test_gap_contains_and_domain_cells():
    assert gap_contains((-np.inf, 1.0), 0.5)
    assert not gap_contains((0.0, 1.0), 1.0)
    assert domain_cells(0.1, 1.0, 20) == 200
    with pytest.raises(ValueError):
        domain_cells(0.0, 1.0)


def test_supercell_folds_bloch_energies(V_ref):
    # without a defect the supercell spectrum contains E_0(k) for k = j / L, including 0 and 1/2
    p = DirectProblem(V_ref, NO_DEFECT, 0.5, 4, pw_cutoff=10)
    evals = lowest(assemble_direct(p), k=8)
    assert evals[0] == pytest.approx(MATHIEU_E0_K0, abs=1e-11)
    assert evals[-1] == pytest.approx(MATHIEU_E0_KHALF, abs=1e-11)


def test_real_space_round_trip(V_ref, Q_down, rng):
    p = DirectProblem(V_ref, Q_down, 0.25, 6, n_fast=32, pw_cutoff=4)
    v = rng.normal(size=p.size) + 1j * rng.normal(size=p.size)
    np.testing.assert_allclose(p.from_real_space(p.to_real_space(v)), v, atol=1e-12)
    # the L^2 norm from coefficients matches the real-space quadrature
    vals = p.to_real_space(v)
    assert p.norm(v) == pytest.approx(math.sqrt(np.sum(np.abs(vals) ** 2) / p.n_fast), rel=1e-12)


def test_defect_fourier_mean(Q_down):
    eps = 0.2
    p = DirectProblem(PeriodicPotential.zero(1), Q_down, eps, 60)
    # zero mode is the supercell mean of eps^2 Q(eps x)
    assert p.q_fourier()[0].real == pytest.approx(eps * Q_down.integral() / p.length, rel=1e-12)


def test_free_particle_direct_equals_scaled_homogenized():
    # V = 0: -u'' + eps^2 Q(eps x) has eigenvalue exactly eps^2 e
    Q = LocalizedPotential(1, "sech2", depth=-2.0, width=1.0)
    eps = 0.25
    p = DirectProblem(PeriodicPotential.zero(1), Q, eps, 80, pw_cutoff=2)
    mu = lowest(assemble_direct(p))[0]
    assert mu == pytest.approx(-(eps**2), abs=1e-10)


@pytest.mark.parametrize("scheme, rate", [("fd2", 4.0), ("fd4", 16.0)])
def test_fd_schemes_converge_to_spectral(V_ref, Q_down, scheme, rate):
    eps, M = 0.5, 30
    ref = lowest(assemble_direct(DirectProblem(V_ref, Q_down, eps, M)))[0]
    errs = [abs(lowest(assemble_direct(DirectProblem(V_ref, Q_down, eps, M, n_fast=n, scheme=scheme)))[0] - ref) for n in (32, 64)]
    assert errs[0] / errs[1] == pytest.approx(rate, rel=0.1)


def test_fd2_free_particle_2d():
    Q = LocalizedPotential(2, "gaussian", depth=-5.0, width=1.0)
    eps = 1.0
    p = DirectProblem(PeriodicPotential.zero(2), Q, eps, 6, n_fast=16, scheme="fd2")
    mu = lowest(assemble_direct(p), sigma=-10.0)[0]
    e = solve_homogenized(HomogenizedProblem(np.eye(2), Q, scheme="spectral", L_box=6.0), 1)[0].e
    assert mu == pytest.approx(eps**2 * e, rel=2e-3)


def test_memory_budget(V_ref, Q_down):
    p = DirectProblem(V_ref, Q_down, 0.05, 400, memory_budget=1024.0)
    with pytest.raises(MemoryBudgetError):
        assemble_direct(p)


def test_gap_search_and_rayleigh(V_ref, Q_down, edge_low, mass_low):
    eps = 0.2
    p = DirectProblem(V_ref, Q_down, eps, 60)
    e = -1.2258
    gap = (-np.inf, edge_low.energy)
    search = find_gap_eigenvalues(p, gap, edge_low.energy + eps**2 * e, 4, edge_low.energy)
    assert len(search.accepted) >= 1
    mode = search.accepted[0]
    assert mode.mu < edge_low.energy and mode.distance_to_edge > 0
    assert mode.boundary_mass < 1e-10
    assert mode.residual < 1e-9
    assert p.norm(mode.u) == pytest.approx(1.0)
    assert rayleigh_quotient(p, mode.u, edge_low.energy) == pytest.approx(mode.mu - edge_low.energy, abs=1e-10)
    # band states (not in the gap) are reported as outside, never accepted
    assert all(not gap_contains(gap, mu) for mu in search.outside)


def test_fit_slope_exact_power_law():
    eps = [0.4, 0.2, 0.1, 0.05]
    fit = fit_slope(eps, [3.0 * e**2.5 for e in eps])
    assert fit["slope"] == pytest.approx(2.5, abs=1e-12)
    assert fit["ci"][0] <= 2.5 + 1e-12 and fit["ci"][1] >= 2.5 - 1e-12
    assert math.isnan(fit_slope([0.1, 0.05], [0.0, 0.0])["slope"])


@pytest.mark.parametrize("n", [1, 2, 3])
def test_averaging_bump_rate(n):
    p = PeriodicPotential.cosine(1.0, 1)
    G = LocalizedPotential(1, "bump", depth=1.0, width=1.0, smoothness=n)
    res = averaging_check(p, G, [1 / 4, 1 / 8, 1 / 16, 1 / 32], n)
    assert res["slope"] >= n


@pytest.mark.parametrize("which", ["low", "top"])
def test_convergence_study_aligns_eigenvector_phase(V_ref, edge_low, edge_top, which):
    # at k = 1/2 the real direct eigenvector and u^(N) differ by a factor i
    from bandgap.bloch import edge_bands, spectral_gap
    from bandgap.effmass import effective_mass
    from bandgap.multiscale import build_expansion
    from bandgap.validator import convergence_study

    edge = edge_low if which == "low" else edge_top
    Q = LocalizedPotential(1, "gaussian", depth=-2.0 if which == "low" else 2.0)
    pair = solve_homogenized(HomogenizedProblem(effective_mass(edge).inner, Q, scheme="spectral"), 1)[0]
    pair = fit_box(pair)[0]
    state = build_expansion(edge, pair, 4)
    gap = spectral_gap(edge_bands(V_ref, 0), edge)
    report = convergence_study(state, gap, (0.3, 0.2, 0.15), 4)
    assert min(report.overlap) > 0.999
    assert max(report.eigenfunction_error) < 1e-4
    assert report.slopes["eigenfunction"]["slope"] > 3.0
    assert report.slopes["residual"]["slope"] > 4.0
