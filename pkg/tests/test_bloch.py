import types

import numpy as np
import pytest
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import mathieu_a, mathieu_b

from bandgap.bloch import (
    apply_Lstar_inverse,
    assemble_bloch_matrix,
    dispersion_derivatives,
    edge_bands,
    find_band_edge,
    solve_bands,
    spectral_gap,
)
from bandgap.errors import BandCrossingError, GaplessEdgeError, HypothesisError, SolvabilityError
from bandgap.lattice import PeriodicPotential

from conftest import MATHIEU_E0_K0, MATHIEU_E0_KHALF


def fd_bloch_lowest(V, n, antiperiodic=False):
    """Lowest eigenvalue of -u'' + V u on a periodic (or antiperiodic) n-point grid."""
    h = 1.0 / n
    x = np.arange(n) * h
    main = 2 / h**2 + V(x)
    off = -np.ones(n - 1) / h**2
    A = sp.diags([off, main, off], [-1, 0, 1]).tolil()
    corner = 1.0 / h**2 if antiperiodic else -1.0 / h**2
    A[0, n - 1] = corner
    A[n - 1, 0] = corner
    return spla.eigsh(A.tocsc(), k=1, sigma=-50.0, which="LM")[0][0]


def test_mathieu_oracle_matches_frozen_values():
    q = 5 / np.pi**2
    assert np.pi**2 * mathieu_a(0, q) == pytest.approx(MATHIEU_E0_K0, abs=1e-12)
    assert np.pi**2 * mathieu_b(1, q) == pytest.approx(MATHIEU_E0_KHALF, abs=1e-12)


def test_band_edges_against_mathieu(edge_low, edge_top):
    assert edge_low.energy == pytest.approx(MATHIEU_E0_K0, abs=1e-12)
    assert edge_top.energy == pytest.approx(MATHIEU_E0_KHALF, abs=1e-12)


def test_band_edge_against_fine_finite_differences(V_ref, edge_low, edge_top):
    # second-order FD on 2048 and 4096 points, Richardson-extrapolated
    for edge, anti in ((edge_low, False), (edge_top, True)):
        e1, e2 = fd_bloch_lowest(V_ref, 2048, anti), fd_bloch_lowest(V_ref, 4096, anti)
        assert (4 * e2 - e1) / 3 == pytest.approx(edge.energy, abs=1e-8)


def test_free_particle_bands():
    V = PeriodicPotential.zero(1)
    bands = solve_bands(V, [[0.0], [0.25]], 3, pw_cutoff=4)
    np.testing.assert_allclose(bands.energies[0], [0, 4 * np.pi**2, 4 * np.pi**2], atol=1e-10)
    np.testing.assert_allclose(bands.energies[1], 4 * np.pi**2 * np.array([0.0625, 0.5625, 1.5625]), atol=1e-10)


def test_bloch_matrix_hermitian():
    V = PeriodicPotential.cosine([2.0, 3.0])
    H = assemble_bloch_matrix(V, (0.5, 0.0), 4)
    np.testing.assert_allclose(H, H.conj().T, atol=0)


def test_workers_give_identical_bands(V_ref):
    k = np.linspace(-0.5, 0.5, 9).reshape(-1, 1)
    a = solve_bands(V_ref, k, 4)
    b = solve_bands(V_ref, k, 4, workers=3)
    np.testing.assert_array_equal(a.energies, b.energies)


def test_edge_state_is_real_normalized_and_annihilated(edge_low, edge_top):
    for edge in (edge_low, edge_top):
        w = edge.coeffs
        assert np.linalg.norm(w) == pytest.approx(1.0, abs=1e-14)
        assert np.linalg.norm(edge.lstar_matrix() @ w) < 1e-10
        assert edge.imag_residual < 1e-10
        x = np.linspace(0, 1, 33)
        vals = edge.evaluate(w, x)
        assert np.max(np.abs(vals.imag)) < 1e-12
        assert edge.gradient_residual < 1e-10
    # the top edge at k = 1/2 is antiperiodic on the cell
    assert edge_top.w_values(1.0 + 0.3) == pytest.approx(-edge_top.w_values(0.3), abs=1e-12)


def test_gauge_sign_convention(edge_low):
    big = np.argmax(np.abs(edge_low.coeffs))
    assert edge_low.coeffs[big].real > 0


def test_degenerate_edge_reports_H2a():
    with pytest.raises(HypothesisError, match=r"H2\(a\)"):
        find_band_edge(PeriodicPotential.zero(1), 0, (0.5,))


def test_non_corner_k_rejected(V_ref):
    with pytest.raises(ValueError):
        find_band_edge(V_ref, 0, (0.25,))


def test_band_crossing_at_stencil_point():
    with pytest.raises(BandCrossingError):
        dispersion_derivatives(PeriodicPotential.zero(2), 2, (0.0, 0.0), pw_cutoff=3)


def test_hessian_of_free_particle():
    grad, hess, asym = dispersion_derivatives(PeriodicPotential.zero(2), 0, (0.0, 0.0), pw_cutoff=3)
    np.testing.assert_allclose(hess, 8 * np.pi**2 * np.eye(2), rtol=1e-8)
    assert np.linalg.norm(grad) < 1e-8
    assert asym < 1e-6


def test_spectral_gaps(V_ref, edge_low, edge_top):
    bands = edge_bands(V_ref, 0)
    low = spectral_gap(bands, edge_low)
    assert low[0] == -np.inf and low[1] == edge_low.energy
    top = spectral_gap(bands, edge_top)
    assert top[0] == edge_top.energy
    assert top[1] == pytest.approx(14.5326, abs=1e-3)


def test_free_particle_interior_edge_is_gapless():
    bands = solve_bands(PeriodicPotential.zero(1), np.linspace(-0.5, 0.5, 33).reshape(-1, 1), 3)
    fake_edge = types.SimpleNamespace(energy=np.pi**2, band=0)
    with pytest.raises(GaplessEdgeError):
        spectral_gap(bands, fake_edge)
    assert bands.spectral_gaps() == []


def test_lstar_inverse_residual_and_orthogonality(edge_top, rng):
    g = rng.normal(size=edge_top.n_pw) + 1j * rng.normal(size=edge_top.n_pw)
    g -= edge_top.coeffs * (np.conj(edge_top.coeffs) @ g)
    u = apply_Lstar_inverse(edge_top, g)
    assert np.linalg.norm(edge_top.lstar_matrix() @ u - g) < 1e-8 * np.linalg.norm(g)
    assert abs(np.conj(edge_top.coeffs) @ u) < 1e-12


def test_lstar_inverse_refuses_unsolvable_rhs(edge_low):
    with pytest.raises(SolvabilityError):
        apply_Lstar_inverse(edge_low, edge_low.coeffs + 0.1)


def test_bands_csv_round_trip(tmp_path, V_ref):
    bands = solve_bands(V_ref, [[0.0], [0.5]], 2)
    bands.to_csv(tmp_path / "b.csv")
    data = np.loadtxt(tmp_path / "b.csv", delimiter=",", skiprows=1)
    np.testing.assert_array_equal(data[:, 1:], bands.energies)


@settings(max_examples=15, deadline=None)
@given(st.floats(0.5, 20.0), st.sampled_from([(0.0,), (0.5,)]))
def test_edge_energy_is_extremal_on_band(amp, k):
    V = PeriodicPotential.cosine(amp, 1)
    edge = find_band_edge(V, 0, k)
    ks = np.linspace(-0.5, 0.5, 41).reshape(-1, 1)
    E = solve_bands(V, ks, 1).energies[:, 0]
    if k == (0.0,):
        assert edge.energy <= E.min() + 1e-10
    else:
        assert edge.energy >= E.max() - 1e-10
