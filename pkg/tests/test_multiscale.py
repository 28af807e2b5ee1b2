import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import cumulative_trapezoid

from bandgap.bloch import find_band_edge
from bandgap.effmass import corrector_cells, effective_mass
from bandgap.errors import SolvabilityError
from bandgap.homogenized import HomogenizedProblem, solve_homogenized
from bandgap.lattice import LocalizedPotential, PeriodicPotential
from bandgap.multiscale import (
    TwoScaleField,
    build_expansion,
    mu_total,
    order_residual,
)

E_AQ_REF = -1.2257995239015593
MU4_REF = -0.003142823898506337


def test_reference_expansion_frozen(reference_state):
    s = reference_state
    assert s.built == 4
    assert s.mu[1] == 0.0
    assert s.mu[2] == pytest.approx(E_AQ_REF, abs=1e-12)
    assert abs(s.mu[3]) < 1e-12
    assert s.mu[4] == pytest.approx(MU4_REF, rel=1e-8)
    assert s.max_defect() < 1e-9


@pytest.mark.parametrize("n", [0, 1, 2, 3, 4])
def test_order_equations_hold_on_tensor_grid(reference_state, n):
    assert order_residual(reference_state, n) < 1e-10


def test_corrector_against_quadrature_oracle(edge_low):
    # 1D, k = 0: chi = w g / 2 + c w with g = -x + I(x) / I(1), I(x) = int_0^x w^-2
    x = np.linspace(0, 1, 8193)
    w = edge_low.w_values(x)
    inv = cumulative_trapezoid(w**-2, x, initial=0.0)
    oracle = 0.5 * w * (-x + inv / inv[-1])
    chi = edge_low.evaluate(corrector_cells(edge_low)[:, 0], x)
    assert np.max(np.abs(chi.imag)) < 1e-12
    # remove the w component of both (Parseval inner product on the cell)
    wn = w / np.sqrt(np.trapezoid(w**2, x))
    proj = lambda f: f - wn * np.trapezoid(wn * f, x)
    assert np.max(np.abs(proj(chi.real) - proj(oracle))) < 1e-6


def test_first_order_term_is_corrector_times_gradient(reference_state):
    s = reference_state
    x = np.linspace(0, 1, 17)
    U1 = s.U(1).sample(s.edge.wavevectors, x)
    dF = s.problem.derivative(s.F0, 0)
    expect = np.outer(2 * s.edge.evaluate(s.chi[:, 0], x).real, dF) + np.outer(s.edge.w_values(x), s.envelope(1))
    assert np.max(np.abs(U1 - expect)) < 1e-12 * max(1.0, np.max(np.abs(expect)))


def test_mu_total(reference_state):
    s = reference_state
    eps = 0.1
    expect = s.edge.energy + eps**2 * s.mu[2] + eps**3 * s.mu[3] + eps**4 * s.mu[4]
    assert mu_total(s, eps, 4) == pytest.approx(expect, abs=1e-15)
    assert mu_total(s, eps, 2) == s.edge.energy + eps**2 * s.mu[2]
    with pytest.raises(ValueError):
        mu_total(s, eps, 6)


@pytest.mark.parametrize("d", [1, 2])
def test_free_particle_collapse(d):
    V = PeriodicPotential.zero(d)
    edge = find_band_edge(V, 0, (0.0,) * d, pw_cutoff=4)
    A = effective_mass(edge).inner
    Q = LocalizedPotential(d, "gaussian", depth=-5.0 if d == 2 else -2.0, width=1.0)
    pair = solve_homogenized(HomogenizedProblem(A, Q, scheme="spectral"), 1)[0]
    s = build_expansion(edge, pair, 4)
    assert np.max(np.abs(s.chi)) < 1e-14
    for n in range(1, 5):
        assert s.U(n).norm(s.problem.weight) < 1e-12
    assert all(s.mu[n] == 0.0 for n in (3, 4)) or max(abs(s.mu[n]) for n in (3, 4)) < 1e-14
    assert mu_total(s, 0.1, 4) == pytest.approx(0.01 * pair.e, abs=1e-15)


def test_top_edge_up_defect():
    V = PeriodicPotential.cosine(10.0, 1)
    edge = find_band_edge(V, 0, (0.5,))
    A = effective_mass(edge).inner
    Q = LocalizedPotential(1, "gaussian", depth=2.0, width=1.0)
    pair = solve_homogenized(HomogenizedProblem(A, Q, scheme="spectral"), 1)[0]
    assert pair.e > 0 and pair.discrete
    s = build_expansion(edge, pair, 4)
    for n in range(5):
        assert order_residual(s, n) < 1e-10
    assert s.mu[4] > 0


def test_higher_orders_residuals(reference_state):
    s = build_expansion(reference_state.edge, reference_state.homog, 6)
    assert s.mu[4] == pytest.approx(MU4_REF, rel=1e-10)
    assert abs(s.mu[5]) < 1e-12
    for n in (5, 6):
        assert order_residual(s, n) < 1e-9


def test_expansion_preconditions(edge_low, mass_low, Q_down):
    fd_pair = solve_homogenized(HomogenizedProblem(mass_low.inner, Q_down), 1)[0]
    with pytest.raises(ValueError, match="spectral"):
        build_expansion(edge_low, fd_pair, 4)
    sp_pair = solve_homogenized(HomogenizedProblem(mass_low.inner, Q_down, scheme="spectral"), 1)[0]
    with pytest.raises(ValueError):
        build_expansion(edge_low, sp_pair, 9)
    up = LocalizedPotential(1, "gaussian", depth=2.0, width=1.0)
    bad = solve_homogenized(HomogenizedProblem(mass_low.inner, up, scheme="spectral"), 1)[0]
    with pytest.raises(ValueError, match="discrete"):
        build_expansion(edge_low, bad, 4)


def test_degenerate_homogenized_pair_refused():
    V = PeriodicPotential.zero(2)
    edge = find_band_edge(V, 0, (0.0, 0.0), pw_cutoff=3)
    Q = LocalizedPotential(2, "gaussian", depth=-5.0, width=1.0)
    pairs = solve_homogenized(HomogenizedProblem(np.eye(2), Q, scheme="spectral"), 3)
    with pytest.raises(SolvabilityError, match="multiplicity"):
        build_expansion(edge, pairs[1], 3)


def test_json_is_deterministic(reference_state):
    a = reference_state.to_json()
    b = build_expansion(reference_state.edge, reference_state.homog, 4).to_json()
    assert a == b
    data = json.loads(a)
    assert set(data["mu"]) == {"0", "1", "2", "3", "4"}


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31))
def test_compress_preserves_the_field(r1, r2, seed):
    rng = np.random.default_rng(seed)
    n_pw, n_y = 7, 11
    # Hermitian-symmetric cells (real functions), possibly rank deficient sums
    def real_cells(r):
        c = rng.normal(size=(n_pw, r)) + 1j * rng.normal(size=(n_pw, r))
        return 0.5 * (c + np.conj(c[::-1]))
    a = TwoScaleField(real_cells(r1), rng.normal(size=(r1, n_y)))
    b = TwoScaleField(real_cells(r2), rng.normal(size=(r2, n_y)))
    s = a + b + a.scale(-0.5)
    dense = s.cells @ s.envelopes
    c = s.compress()
    assert c.rank <= min(r1 + r2, n_y)
    assert np.max(np.abs(c.cells @ c.envelopes - dense)) < 1e-12 * max(1.0, np.max(np.abs(dense)))
    np.testing.assert_allclose(c.cells, np.conj(c.cells[::-1]), atol=1e-12)
    zero = (a - a).compress()
    assert zero.rank == 0 or np.max(np.abs(zero.cells @ zero.envelopes)) < 1e-12


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31))
def test_project_out_removes_kernel_component(seed):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=5) + 1j * rng.normal(size=5)
    w /= np.linalg.norm(w)
    f = TwoScaleField(rng.normal(size=(5, 3)) + 0j, rng.normal(size=(3, 4)))
    assert np.max(np.abs(f.project_out(w).cell_pairing(w))) < 1e-12
