import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bandgap.errors import HypothesisError, SolvabilityError
from bandgap.homogenized import (
    HomogenizedProblem,
    apply_LAQ_inverse,
    energy_functional,
    envelope_decay_length,
    fit_box,
    interpolate,
    solve_homogenized,
)
from bandgap.lattice import LocalizedPotential

PT = LocalizedPotential(1, "sech2", depth=-2.0, width=1.0)


def test_poschl_teller_fd_second_order():
    coarse = solve_homogenized(HomogenizedProblem(np.eye(1), PT), 2)[0]
    fine = solve_homogenized(HomogenizedProblem(np.eye(1), PT, h_y=0.025), 2)[0]
    err_c, err_f = abs(coarse.e + 1), abs(fine.e + 1)
    assert err_c < 1e-4
    assert err_c / err_f == pytest.approx(4.0, rel=0.05)
    # exact eigenfunction is sech(y), so the pair is simple and the next level is not discrete
    pairs = solve_homogenized(HomogenizedProblem(np.eye(1), PT), 3)
    assert pairs[0].discrete and pairs[0].multiplicity == 1
    assert not pairs[1].discrete


def test_poschl_teller_spectral():
    pair = solve_homogenized(HomogenizedProblem(np.eye(1), PT, scheme="spectral"), 2)[0]
    assert pair.e == pytest.approx(-1.0, abs=1e-10)
    y = pair.problem.points()[:, 0]
    exact = 1 / np.cosh(y)
    exact /= pair.problem.norm(exact)
    assert np.max(np.abs(pair.F - exact)) < 1e-8


def test_scaled_mass_poschl_teller():
    # -a F'' - 2a sech^2 F = e F has e = -a
    Q = LocalizedPotential(1, "sech2", depth=-2 * 0.7, width=1.0)
    pair = solve_homogenized(HomogenizedProblem(0.7 * np.eye(1), Q, scheme="spectral"), 1)[0]
    assert pair.e == pytest.approx(-0.7, abs=1e-10)


def test_reflection_for_negative_mass():
    up = LocalizedPotential(1, "sech2", depth=2.0, width=1.0)
    for scheme in ("fd", "spectral"):
        pair = solve_homogenized(HomogenizedProblem(-np.eye(1), up, scheme=scheme), 2)[0]
        assert pair.e == pytest.approx(1.0, abs=1e-4)
        assert pair.discrete


def test_up_defect_at_positive_mass_has_no_bound_state():
    up = LocalizedPotential(1, "gaussian", depth=2.0, width=1.0)
    with pytest.raises(HypothesisError, match="H3"):
        solve_homogenized(HomogenizedProblem(np.eye(1), up), 2, require_discrete=True)


def test_indefinite_mass_refused():
    Q = LocalizedPotential(2, "gaussian", depth=-5.0, width=1.0)
    with pytest.raises(HypothesisError, match=r"H2\(c\)"):
        solve_homogenized(HomogenizedProblem(np.diag([1.0, -1.0]), Q), 2)


def test_grid_checks():
    Q = LocalizedPotential(1, "gaussian", depth=-1.0, width=0.2)
    with pytest.raises(ValueError, match="16 points"):
        HomogenizedProblem(np.eye(1), Q, h_y=0.05)
    with pytest.raises(ValueError, match="decay length"):
        HomogenizedProblem(np.eye(1), LocalizedPotential(1, "gaussian", depth=-1.0, width=6.0), L_box=20.0)


def test_radial_gaussian_2d_degenerate_cluster():
    Q = LocalizedPotential(2, "gaussian", depth=-5.0, width=1.0)
    pairs = solve_homogenized(HomogenizedProblem(np.eye(2), Q), 3)
    assert pairs[0].multiplicity == 1
    assert pairs[1].multiplicity == 2 and pairs[2].multiplicity == 2
    assert abs(pairs[1].e - pairs[2].e) < 1e-6
    spec = solve_homogenized(HomogenizedProblem(np.eye(2), Q, scheme="spectral"), 3)
    assert spec[0].e == pytest.approx(pairs[0].e, abs=5e-3)
    assert spec[1].multiplicity == 2
    with pytest.raises(SolvabilityError):
        apply_LAQ_inverse(pairs[1], np.zeros(pairs[1].problem.size) + 1.0)


def test_eigenvector_normalized_and_signed():
    Q = LocalizedPotential(1, "gaussian", depth=-2.0, width=1.0)
    pair = solve_homogenized(HomogenizedProblem(0.88 * np.eye(1), Q, scheme="spectral"), 1)[0]
    assert pair.problem.norm(pair.F) == pytest.approx(1.0, abs=1e-13)
    assert pair.F.max() > 0 and pair.F.min() > -1e-10
    assert pair.boundary_mass < 1e-12
    assert energy_functional(pair.problem, pair.F) == pytest.approx(pair.e, abs=1e-12)


@pytest.mark.parametrize("scheme", ["fd", "spectral"])
def test_LAQ_inverse(scheme, rng):
    Q = LocalizedPotential(1, "gaussian", depth=-2.0, width=1.0)
    problem = HomogenizedProblem(np.eye(1), Q, scheme=scheme)
    pair = solve_homogenized(problem, 1)[0]
    g = np.exp(-problem.points()[:, 0] ** 2) * problem.points()[:, 0]  # odd, orthogonal to the even F
    u = apply_LAQ_inverse(pair, g)
    assert problem.norm(problem.apply_L(u) - pair.e * u - g) < 1e-10 * problem.norm(g)
    assert abs(problem.inner(pair.F, u)) < 1e-12
    with pytest.raises(SolvabilityError):
        apply_LAQ_inverse(pair, pair.F)


def test_2d_spectral_large_grid_inverse():
    Q = LocalizedPotential(2, "gaussian", depth=-5.0, width=1.0)
    problem = HomogenizedProblem(np.eye(2), Q, scheme="spectral")
    assert problem.size > 3000
    pair = solve_homogenized(problem, 1)[0]
    y = problem.points()
    g = y[:, 0] * np.exp(-np.sum(y**2, axis=1))
    u = apply_LAQ_inverse(pair, g)
    assert problem.norm(problem.apply_L(u) - pair.e * u - g) < 1e-7 * problem.norm(g)


def test_interpolation_reproduces_nodes():
    Q = LocalizedPotential(1, "gaussian", depth=-2.0, width=1.0)
    # the fd cubic spline is solved iteratively by scipy, so nodes match to ~1e-7 relative
    for scheme, rtol in (("spectral", 1e-10), ("fd", 1e-5)):
        pair = solve_homogenized(HomogenizedProblem(np.eye(1), Q, scheme=scheme), 1)[0]
        y = pair.problem.points()[::37, 0]
        np.testing.assert_allclose(interpolate(pair.problem, pair.F, y), pair.F[::37], rtol=rtol, atol=1e-10)
        assert interpolate(pair.problem, pair.F, np.array([25.0]))[0] == 0.0


def test_spectral_interpolation_between_nodes():
    pair = solve_homogenized(HomogenizedProblem(np.eye(1), PT, scheme="spectral"), 1)[0]
    y = np.array([0.0123, 1.777, -3.3])
    exact = 1 / np.cosh(y) / np.sqrt(2.0)  # ||sech|| = sqrt(2)
    np.testing.assert_allclose(interpolate(pair.problem, pair.F, y), exact, atol=1e-8)


def test_solve_is_deterministic():
    Q = LocalizedPotential(2, "gaussian", depth=-5.0, width=1.0)
    a = solve_homogenized(HomogenizedProblem(np.eye(2), Q, h_y=0.125, L_box=8.0), 2)
    b = solve_homogenized(HomogenizedProblem(np.eye(2), Q, h_y=0.125, L_box=8.0), 2)
    assert [p.e for p in a] == [p.e for p in b]
    np.testing.assert_array_equal(a[0].F, b[0].F)


def test_csv_output(tmp_path):
    pair = solve_homogenized(HomogenizedProblem(np.eye(1), PT), 1)[0]
    pair.to_csv(tmp_path / "env.csv")
    data = np.loadtxt(tmp_path / "env.csv", delimiter=",", skiprows=1)
    np.testing.assert_array_equal(data[:, -1], pair.F)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31))
def test_rayleigh_quotient_bounded_below_by_ground_state(seed):
    problem = HomogenizedProblem(np.eye(1), PT, scheme="spectral", h_y=0.2)
    e0 = solve_homogenized(problem, 1)[0].e
    F = np.random.default_rng(seed).normal(size=problem.size) * np.exp(-problem.points()[:, 0] ** 2 / 8)
    assert energy_functional(problem, F) >= e0 - 1e-10


@pytest.mark.parametrize("scheme", ["fd", "spectral"])
def test_interpolate_stack_matches_single_calls(scheme, rng):
    Q = LocalizedPotential(2, "gaussian", depth=-3.0)
    problem = HomogenizedProblem(np.eye(2), Q, L_box=4.0, h_y=0.25, scheme=scheme, check_grid=False)
    stack = rng.standard_normal((3, problem.size))
    y = rng.uniform(-5.0, 5.0, size=(40, 2))
    both = interpolate(problem, stack, y)
    assert both.shape == (40, 3)
    for j in range(3):
        np.testing.assert_allclose(both[:, j], interpolate(problem, stack[j], y), atol=1e-13)
    assert np.all(both[np.any(np.abs(y) >= 4.0, axis=1)] == 0.0)


def test_fit_box_widens_for_slow_envelope():
    Q = LocalizedPotential(1, "gaussian", depth=-0.3)
    pair = solve_homogenized(HomogenizedProblem(np.eye(1), Q, scheme="spectral"), 1)[0]
    wide = fit_box(pair)[0]
    assert wide.problem.L_box >= 32 * envelope_decay_length(np.eye(1), pair.e) - 1e-9
    assert wide.boundary_mass < 1e-24 < pair.boundary_mass
    assert fit_box(wide)[0] is wide
