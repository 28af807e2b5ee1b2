"""Floquet-Bloch band structure by plane-wave Galerkin, band-edge certification
and the deflated inverse of the band-edge operator L_* = -Laplacian + V - E_*.
"""

from __future__ import annotations

import csv
import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg as sla

from .errors import BandCrossingError, GaplessEdgeError, GaugeError, HypothesisError, NumericalError, SolvabilityError
from .lattice import PeriodicPotential, fourier_coupling_matrix, plane_wave_basis, synthesize

log = logging.getLogger(__name__)

FOUR_PI2 = 4 * np.pi**2
DEFAULT_PW_CUTOFF = {1: 16, 2: 10, 3: 6}
TOL_GRAD = 1e-6
TOL_SOLV = 1e-8
GAP_TOL = 1e-10


def default_cutoff(dimension: int) -> int:
    return DEFAULT_PW_CUTOFF[dimension]


def tol_simple(energy: float) -> float:
    return 1e-6 * abs(energy) + 1e-8


def assemble_bloch_matrix(V: PeriodicPotential, k, pw_cutoff: int, basis: np.ndarray | None = None) -> np.ndarray:
    """Galerkin matrix of -(grad + 2 pi i k)^2 + V in plane waves e^{2 pi i m.x}.

    Entries are ``4 pi^2 |m + k|^2 delta + V_{m - m'}``.  Fourier coefficients of V
    beyond the basis reach are simply absent (treated as zero).
    """
    if pw_cutoff < 1:
        raise ValueError("pw_cutoff must be >= 1")
    k = np.asarray(k, dtype=float).reshape(V.dimension)
    if basis is None:
        basis = plane_wave_basis(V.dimension, pw_cutoff)
    kinetic = FOUR_PI2 * np.sum((basis + k) ** 2, axis=1)
    H = fourier_coupling_matrix(V, basis)
    H[np.diag_indices_from(H)] += kinetic
    return H


def _eigh(H: np.ndarray, k, n_bands: int | None = None, vectors: bool = True):
    try:
        if n_bands is None:
            return sla.eigh(H, eigvals_only=not vectors)
        return sla.eigh(H, eigvals_only=not vectors, subset_by_index=[0, n_bands - 1])
    except (sla.LinAlgError, ValueError) as exc:
        raise NumericalError(f"Bloch eigensolve failed at k={list(np.atleast_1d(k))} for matrix size {H.shape[0]}: {exc}") from exc


@dataclass
class BandStructure:
    """Lowest bands E_b(k) on a list of quasimomenta."""

    k_points: np.ndarray  # (n_k, d)
    energies: np.ndarray  # (n_k, n_bands)
    pw_cutoff: int
    vectors: list | None = None  # per k: (n_pw, n_bands) plane-wave coefficients
    basis: np.ndarray | None = None

    @property
    def n_bands(self) -> int:
        return self.energies.shape[1]

    @property
    def k_resolution(self) -> float:
        if len(self.k_points) < 2:
            return float("inf")
        diffs = np.abs(np.diff(np.sort(self.k_points, axis=0), axis=0))
        diffs = diffs[diffs > 1e-15]
        return float(diffs.min()) if diffs.size else float("inf")

    def band_intervals(self) -> np.ndarray:
        """[min_k E_b, max_k E_b] per band, shape (n_bands, 2)."""
        return np.stack([self.energies.min(axis=0), self.energies.max(axis=0)], axis=1)

    def spectral_gaps(self) -> list:
        """Open gaps between consecutive sampled bands (union of band intervals)."""
        intervals = sorted(map(tuple, self.band_intervals()))
        gaps = []
        top = intervals[0][1]
        for lo, hi in intervals[1:]:
            if lo - top > GAP_TOL:
                gaps.append((top, lo))
            top = max(top, hi)
        return gaps

    def to_csv(self, path) -> None:
        d = self.k_points.shape[1]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"k{j + 1}" for j in range(d)] + [f"E{b}" for b in range(self.n_bands)])
            for k, row in zip(self.k_points, self.energies):
                writer.writerow([repr(float(v)) for v in k] + [repr(float(v)) for v in row])


def solve_bands(
    V: PeriodicPotential,
    k_list,
    n_bands: int,
    pw_cutoff: int | None = None,
    store_vectors: bool = False,
    workers: int | None = None,
) -> BandStructure:
    """Lowest ``n_bands`` eigenvalues of the Bloch problem at every k.

    k-points are independent; ``workers > 1`` solves them on a thread pool.
    """
    pw_cutoff = pw_cutoff or default_cutoff(V.dimension)
    k_arr = np.asarray(k_list, dtype=float).reshape(-1, V.dimension)
    basis = plane_wave_basis(V.dimension, pw_cutoff)
    if n_bands > len(basis):
        raise ValueError(f"n_bands={n_bands} exceeds matrix dimension {len(basis)}")

    def one(k):
        H = assemble_bloch_matrix(V, k, pw_cutoff, basis)
        if store_vectors:
            return _eigh(H, k, n_bands, vectors=True)
        return _eigh(H, k, n_bands, vectors=False), None

    if workers and workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(one, k_arr))
    else:
        results = [one(k) for k in k_arr]
    energies = np.array([r[0] for r in results])
    vectors = [r[1] for r in results] if store_vectors else None
    return BandStructure(k_arr, energies, pw_cutoff, vectors, basis)


def dense_k_grid(dimension: int, n_k: int) -> np.ndarray:
    """Tensor grid of n_k points per axis on [-1/2, 1/2]^d (end points included)."""
    axis = np.linspace(-0.5, 0.5, n_k)
    return np.array(list(itertools.product(axis, repeat=dimension)))


def corner_points(dimension: int) -> np.ndarray:
    return np.array(list(itertools.product((0.0, 0.5), repeat=dimension)))


@dataclass(frozen=True, eq=False)
class BandEdge:
    """Certified band edge E_* = E_b(k_*) with its real edge state w.

    ``coeffs`` are plane-wave coefficients of w on the wavevectors
    ``wavevectors = basis + k``, i.e. the Bloch phase is folded into w, so that
    w(x) = sum_G coeffs_G exp(2 pi i G.x) is real and satisfies L_* w = 0.
    """

    potential: PeriodicPotential
    band: int
    k: tuple
    energy: float
    coeffs: np.ndarray
    basis: np.ndarray
    pw_cutoff: int
    simplicity_gap: float
    gradient_residual: float
    imag_residual: float
    bloch_energies: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def dimension(self) -> int:
        return self.potential.dimension

    @property
    def wavevectors(self) -> np.ndarray:
        return self.basis + np.asarray(self.k)

    @property
    def n_pw(self) -> int:
        return len(self.basis)

    @property
    def is_lowest(self) -> bool:
        return self.band == 0 and all(kj == 0 for kj in self.k)

    def lstar_matrix(self) -> np.ndarray:
        if "lstar" not in self._cache:
            H = assemble_bloch_matrix(self.potential, self.k, self.pw_cutoff, self.basis)
            self._cache["lstar"] = H - self.energy * np.eye(self.n_pw)
        return self._cache["lstar"]

    def derivative(self, coeffs: np.ndarray, j: int) -> np.ndarray:
        """Coefficients of d/dx_j of a cell function given in this basis."""
        factor = 2j * np.pi * self.wavevectors[:, j]
        coeffs = np.asarray(coeffs)
        return factor.reshape((-1,) + (1,) * (coeffs.ndim - 1)) * coeffs

    def grad_w(self, j: int) -> np.ndarray:
        return self.derivative(self.coeffs, j)

    def inner(self, f: np.ndarray, g: np.ndarray):
        """L^2(cell) pairing by Parseval, conjugate-linear in f."""
        return np.conj(f).T @ g

    def evaluate(self, coeffs: np.ndarray, x) -> np.ndarray:
        return synthesize(coeffs, self.wavevectors, x)

    def w_values(self, x) -> np.ndarray:
        return self.evaluate(self.coeffs, x).real

    def to_json_dict(self) -> dict:
        return {
            "band": self.band,
            "k": list(self.k),
            "energy": self.energy,
            "simplicity_gap": self.simplicity_gap,
            "gradient_residual": self.gradient_residual,
            "imag_residual": self.imag_residual,
            "pw_cutoff": self.pw_cutoff,
            "coefficients": [
                [list(map(float, G)), float(c.real), float(c.imag)] for G, c in zip(self.wavevectors, self.coeffs)
            ],
        }


def _real_gauge(vec: np.ndarray, wavevectors: np.ndarray) -> tuple[np.ndarray, float]:
    """Rotate a simple eigenvector so that the function it represents is real.

    The phase maximizing realness is half the argument of int u^2 = sum_G c_G c_{-G}.
    The overall sign makes the largest coefficient have positive real part.
    Returns (coefficients of the real function, relative size of the discarded
    anti-real part).
    """
    index = {tuple(np.round(2 * G).astype(int)): i for i, G in enumerate(wavevectors)}
    partner = np.array([index[tuple(np.round(-2 * G).astype(int))] for G in wavevectors])
    pairing = np.sum(vec * vec[partner])
    phase = np.exp(-0.5j * np.angle(pairing)) if abs(pairing) > 1e-300 else 1.0
    c = vec * phase
    real_part = 0.5 * (c + np.conj(c[partner]))
    resid = float(np.linalg.norm(c - real_part) / np.linalg.norm(c))
    big = np.argmax(np.abs(real_part))
    if real_part[big].real < 0 or (real_part[big].real == 0 and real_part[big].imag < 0):
        real_part = -real_part
    real_part /= np.linalg.norm(real_part)
    return real_part, resid


def _check_corner(k, dimension: int) -> tuple:
    k = tuple(float(v) for v in np.atleast_1d(k))
    if len(k) != dimension:
        raise ValueError(f"k_* must have {dimension} components")
    for kj in k:
        if not any(abs(kj - c) < 1e-14 for c in (0.0, 0.5, -0.5)):
            raise ValueError(f"k_* components must lie in {{0, 1/2}}, got {k}")
    return tuple(0.5 if abs(abs(kj) - 0.5) < 1e-14 else 0.0 for kj in k)


def find_band_edge(
    V: PeriodicPotential,
    band: int,
    k,
    pw_cutoff: int | None = None,
    tol_grad: float = TOL_GRAD,
    simplicity_tol: float | None = None,
) -> BandEdge:
    """Locate and certify the band edge E_band(k) at a Brillouin-zone corner.

    Raises HypothesisError("H2(a)") for a degenerate edge and ("H2(b)") when
    the band gradient, evaluated by Hellmann-Feynman, does not vanish.
    """
    k = _check_corner(k, V.dimension)
    pw_cutoff = pw_cutoff or default_cutoff(V.dimension)
    basis = plane_wave_basis(V.dimension, pw_cutoff, k)
    if band + 1 >= len(basis):
        raise ValueError("band index exceeds the plane-wave basis")
    H = assemble_bloch_matrix(V, k, pw_cutoff, basis)
    evals, evecs = _eigh(H, k, vectors=True)
    energy = float(evals[band])
    neighbours = [abs(evals[b] - energy) for b in (band - 1, band + 1) if 0 <= b < len(evals)]
    gap = float(min(neighbours))
    tol = simplicity_tol if simplicity_tol is not None else tol_simple(energy)
    if gap < tol:
        raise HypothesisError("H2(a)", f"E_{band}(k={list(k)}) = {energy:.12g} is degenerate (neighbour gap {gap:.3e} < {tol:.1e})")

    G = basis + np.asarray(k)
    vec = evecs[:, band]
    # Hellmann-Feynman: dE/dk_j = <p, 8 pi^2 (m + k)_j p>
    grad = 2 * FOUR_PI2 * (np.abs(vec) ** 2 @ G)
    grad_res = float(np.linalg.norm(grad))
    if grad_res >= tol_grad:
        raise HypothesisError("H2(b)", f"|grad E_{band}(k={list(k)})| = {grad_res:.3e} >= {tol_grad:.1e}; not a critical point")

    coeffs, imag_res = _real_gauge(vec, G)
    if imag_res > 1e-10:
        raise GaugeError(f"band-edge state cannot be made real (anti-real part {imag_res:.2e})")
    edge = BandEdge(V, band, k, energy, coeffs, basis, pw_cutoff, gap, grad_res, imag_res, evals.copy())
    log.debug("band edge b=%d k=%s E=%.15g gap=%.3e", band, k, energy, gap)
    return edge


def _stencil_energy(V, band, k, pw_cutoff, basis, tol):
    evals = _eigh(assemble_bloch_matrix(V, k, pw_cutoff, basis), k, min(band + 2, len(basis)), vectors=False)
    e = evals[band]
    near = [abs(evals[b] - e) for b in (band - 1, band + 1) if 0 <= b < len(evals)]
    if min(near) < tol:
        raise BandCrossingError(f"band {band} crosses a neighbour near k={list(np.atleast_1d(k))} (gap {min(near):.2e})")
    return e


def _fd_derivatives(V, band, k, h, pw_cutoff, basis, tol):
    d = V.dimension
    k = np.asarray(k, dtype=float)
    E0 = _stencil_energy(V, band, k, pw_cutoff, basis, tol)
    eye = np.eye(d)
    Ep = [_stencil_energy(V, band, k + h * eye[j], pw_cutoff, basis, tol) for j in range(d)]
    Em = [_stencil_energy(V, band, k - h * eye[j], pw_cutoff, basis, tol) for j in range(d)]
    grad = np.array([(Ep[j] - Em[j]) / (2 * h) for j in range(d)])
    hess = np.zeros((d, d))
    for j in range(d):
        hess[j, j] = (Ep[j] - 2 * E0 + Em[j]) / h**2
        for l in range(j + 1, d):
            epp = _stencil_energy(V, band, k + h * (eye[j] + eye[l]), pw_cutoff, basis, tol)
            epm = _stencil_energy(V, band, k + h * (eye[j] - eye[l]), pw_cutoff, basis, tol)
            emp = _stencil_energy(V, band, k - h * (eye[j] - eye[l]), pw_cutoff, basis, tol)
            emm = _stencil_energy(V, band, k - h * (eye[j] + eye[l]), pw_cutoff, basis, tol)
            hess[j, l] = (epp - epm - emp + emm) / (4 * h**2)
            hess[l, j] = (epp - emp - epm + emm) / (4 * h**2)
    return grad, hess


def dispersion_derivatives(
    V: PeriodicPotential,
    band: int,
    k,
    h: float = 1e-3,
    pw_cutoff: int | None = None,
    richardson: bool = True,
) -> tuple[np.ndarray, np.ndarray, float]:
    """Central-difference gradient and Hessian of E_band at k.

    With ``richardson`` the step-h and step-h/2 results are combined to cancel
    the O(h^2) error.  Returns (gradient, symmetrized Hessian, pre-symmetrization
    asymmetry).  A neighbouring band closer than tol_simple at any stencil
    point raises BandCrossingError.
    """
    pw_cutoff = pw_cutoff or default_cutoff(V.dimension)
    k_arr = np.asarray(k, dtype=float).reshape(V.dimension)
    basis = plane_wave_basis(V.dimension, pw_cutoff, k_arr)
    E0 = _stencil_energy(V, band, k_arr, pw_cutoff, basis, 0.0)
    tol = tol_simple(E0)
    grad, hess = _fd_derivatives(V, band, k_arr, h, pw_cutoff, basis, tol)
    if richardson:
        grad2, hess2 = _fd_derivatives(V, band, k_arr, h / 2, pw_cutoff, basis, tol)
        grad = (4 * grad2 - grad) / 3
        hess = (4 * hess2 - hess) / 3
    asym = float(np.max(np.abs(hess - hess.T))) if hess.size else 0.0
    return grad, 0.5 * (hess + hess.T), asym


def spectral_gap(bands: BandStructure, edge: BandEdge) -> tuple[float, float]:
    """Open spectral gap adjacent to the edge, on the side the edge bounds.

    A band minimum bounds a gap below (possibly the half line below the whole
    spectrum), a band maximum a gap above.  Raises GaplessEdgeError when the
    adjacent gap has width below 1e-10 or another band overlaps E_*.
    """
    E = edge.energy
    intervals = bands.band_intervals()
    lo_b, hi_b = intervals[edge.band]
    tol = 1e-9 * max(1.0, abs(E))
    at_bottom = E <= lo_b + tol
    at_top = E >= hi_b - tol
    if not (at_bottom or at_top):
        raise GaplessEdgeError(f"E_*={E:.12g} is interior to band {edge.band} on the sampled k-grid")
    others = [iv for b, iv in enumerate(intervals) if b != edge.band]
    if at_bottom and not at_top:
        if any(lo < E - tol and hi > E - tol for lo, hi in others):
            raise GaplessEdgeError(f"no gap below E_*={E:.12g}: another band overlaps the edge")
        below = [hi for lo, hi in others if hi <= E + tol]
        lower = max(below) if below else -np.inf
        if E - lower < GAP_TOL:
            raise GaplessEdgeError(f"gapless edge: gap below E_*={E:.12g} has width {E - lower:.2e}")
        return (float(lower), E)
    if any(hi > E + tol and lo < E + tol for lo, hi in others):
        raise GaplessEdgeError(f"no gap above E_*={E:.12g}: another band overlaps the edge")
    above = [lo for lo, hi in others if lo >= E - tol]
    if not above:
        raise GaplessEdgeError(f"no band sampled above E_*={E:.12g}; increase n_bands")
    upper = min(above)
    if upper - E < GAP_TOL:
        raise GaplessEdgeError(f"gapless edge: gap above E_*={E:.12g} has width {upper - E:.2e}")
    return (E, float(upper))


EDGE_SWEEP_N_K = {1: 65, 2: 33, 3: 13}


def edge_bands(V: PeriodicPotential, edge_band: int, n_k: int | None = None, pw_cutoff: int | None = None) -> BandStructure:
    """Dense sweep (plus all zone corners) used to bracket the gap next to an edge."""
    n_k = n_k or EDGE_SWEEP_N_K[V.dimension]
    k = np.concatenate([dense_k_grid(V.dimension, n_k), corner_points(V.dimension)])
    return solve_bands(V, k, edge_band + 2, pw_cutoff)


def _deflated_lu(edge: BandEdge):
    if "deflated_lu" not in edge._cache:
        w = edge.coeffs
        M = edge.lstar_matrix() + np.outer(w, np.conj(w))
        edge._cache["deflated_lu"] = sla.lu_factor(M)
    return edge._cache["deflated_lu"]


def apply_Lstar_inverse(
    edge: BandEdge, g: np.ndarray, tol_solv: float = TOL_SOLV, check: bool = True, reference_norm: float | None = None
) -> np.ndarray:
    """Solve L_* u = g with <w, u> = 0 for g orthogonal to w.

    ``g`` holds plane-wave coefficients in the edge basis, either one vector or
    columns of several.  The solve uses the deflated matrix L_* + w w^H, which
    is invertible when the edge is simple and returns the solution orthogonal
    to w.  ``reference_norm`` replaces the per-column norm in both checks,
    which matters for blocks whose columns differ greatly in size.
    """
    g = np.asarray(g, dtype=complex)
    single = g.ndim == 1
    G = g[:, None] if single else g
    if G.shape[0] != edge.n_pw:
        raise ValueError(f"cell function has {G.shape[0]} coefficients, edge basis has {edge.n_pw}")
    norms = np.linalg.norm(G, axis=0)
    if reference_norm is not None:
        norms = np.full_like(norms, reference_norm)
    defects = np.abs(np.conj(edge.coeffs) @ G)
    bad = defects > tol_solv * np.maximum(norms, 1e-300)
    bad &= norms > 0
    if np.any(bad):
        raise SolvabilityError(
            f"Fredholm condition for L_* violated: |<w, g>| = {defects[bad].max():.3e} exceeds {tol_solv:.1e} * |g|"
        )
    U = sla.lu_solve(_deflated_lu(edge), G)
    if check:
        resid = np.linalg.norm(edge.lstar_matrix() @ U - G, axis=0)
        rel = np.where(norms > 0, resid / np.maximum(norms, 1e-300), resid)
        if np.any(rel > 1e-8):
            raise NumericalError(f"L_* inverse residual {rel.max():.2e} exceeds 1e-8")
    return U[:, 0] if single else U
