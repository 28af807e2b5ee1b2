"""Inverse effective-mass tensor A at a band edge, by two independent routes,
and certification of the hypotheses the bifurcation theory relies on."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bloch import BandEdge, apply_Lstar_inverse, default_cutoff, dispersion_derivatives
from .errors import HypothesisError, SolvabilityError
from .lattice import PeriodicPotential

DEFINITE_TOL = 1e-8
DUAL_TOL = 1e-5


def classify_definiteness(eigenvalues, tol: float = DEFINITE_TOL) -> str:
    ev = np.asarray(eigenvalues)
    if np.all(ev > tol):
        return "positive"
    if np.all(ev < -tol):
        return "negative"
    return "indefinite"


@dataclass(frozen=True)
class EffectiveMassTensor:
    A: np.ndarray
    method: str
    asymmetry: float = 0.0

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        if A.shape[0] != A.shape[1]:
            raise ValueError("A must be square")
        object.__setattr__(self, "A", 0.5 * (A + A.T))

    @property
    def dimension(self) -> int:
        return self.A.shape[0]

    @property
    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.A)

    @property
    def definiteness(self) -> str:
        return classify_definiteness(self.eigenvalues)

    @property
    def sign(self) -> int:
        """+1 or -1 for a definite tensor, 0 otherwise."""
        return {"positive": 1, "negative": -1}.get(self.definiteness, 0)

    @property
    def i_minus_a_eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(np.eye(self.dimension) - self.A)

    def require_definite(self) -> int:
        if self.sign == 0:
            raise HypothesisError("H2(c)", f"A is not sign definite (eigenvalues {self.eigenvalues.tolist()})")
        return self.sign

    def to_json_dict(self) -> dict:
        return {
            "method": self.method,
            "A": self.A.tolist(),
            "eigenvalues": self.eigenvalues.tolist(),
            "definiteness": self.definiteness,
            "i_minus_a_eigenvalues": self.i_minus_a_eigenvalues.tolist(),
            "asymmetry": self.asymmetry,
        }


def corrector_cells(edge: BandEdge) -> np.ndarray:
    """Columns chi_j = L_*^{-1} d_j w, the cell correctors (orthogonal to w)."""
    if "chi" not in edge._cache:
        grads = np.stack([edge.grad_w(j) for j in range(edge.dimension)], axis=1)
        try:
            edge._cache["chi"] = apply_Lstar_inverse(edge, grads)
        except SolvabilityError as exc:
            raise SolvabilityError(f"H2 violated upstream: {exc}") from exc
    return edge._cache["chi"]


def effective_mass_inner_product(edge: BandEdge) -> EffectiveMassTensor:
    """A_jl = delta_jl - 4 <d_j w, L_*^{-1} d_l w>."""
    d = edge.dimension
    grads = np.stack([edge.grad_w(j) for j in range(d)], axis=1)
    chi = corrector_cells(edge)
    M = np.conj(grads).T @ chi
    if np.max(np.abs(M.imag), initial=0.0) > 1e-8 * max(1.0, np.max(np.abs(M))):
        raise SolvabilityError(f"corrector pairing is not real ({np.max(np.abs(M.imag)):.2e}); gauge of w is broken")
    raw = np.eye(d) - 4 * M.real
    asym = float(np.max(np.abs(raw - raw.T)))
    return EffectiveMassTensor(raw, "inner_product", asym)


def effective_mass_hessian(V: PeriodicPotential, band: int, k, h: float = 1e-3, pw_cutoff: int | None = None) -> EffectiveMassTensor:
    """A = Hessian of E_band at k divided by 8 pi^2 (Richardson-improved differences)."""
    pw_cutoff = pw_cutoff or default_cutoff(V.dimension)
    _, hess, asym = dispersion_derivatives(V, band, k, h, pw_cutoff)
    return EffectiveMassTensor(hess / (8 * np.pi**2), "hessian", asym / (8 * np.pi**2))


def dual_discrepancy(a: EffectiveMassTensor, b: EffectiveMassTensor) -> float:
    """max |A_a - A_b| / max |A_b|."""
    scale = max(np.max(np.abs(b.A)), 1e-300)
    return float(np.max(np.abs(a.A - b.A)) / scale)


@dataclass
class EffectiveMassReport:
    inner: EffectiveMassTensor
    hessian: EffectiveMassTensor
    discrepancy: float

    @property
    def authoritative(self) -> EffectiveMassTensor:
        return self.inner

    def to_json_dict(self) -> dict:
        return {
            "A": self.inner.A.tolist(),
            "eigenvalues": self.inner.eigenvalues.tolist(),
            "definiteness": self.inner.definiteness,
            "i_minus_a_eigenvalues": self.inner.i_minus_a_eigenvalues.tolist(),
            "inner_product": self.inner.to_json_dict(),
            "hessian": self.hessian.to_json_dict(),
            "dual_method_discrepancy": self.discrepancy,
            "dual_method_ok": self.discrepancy < DUAL_TOL,
        }


def effective_mass(edge: BandEdge, h: float = 1e-3) -> EffectiveMassReport:
    """Both routes at once, with the relative discrepancy."""
    inner = effective_mass_inner_product(edge)
    hess = effective_mass_hessian(edge.potential, edge.band, edge.k, h, edge.pw_cutoff)
    return EffectiveMassReport(inner, hess, dual_discrepancy(hess, inner))


def check_I_minus_A(edge: BandEdge, A: EffectiveMassTensor) -> float:
    """Smallest eigenvalue of I - A; meaningful at the lowest band edge."""
    if not edge.is_lowest:
        raise ValueError("I - A positivity is a statement about the lowest band edge (b=0, k=0)")
    return float(A.i_minus_a_eigenvalues.min())


def mu1_solvability_integral(edge: BandEdge) -> float:
    """max_j |<w, 2 d_j w>|, which vanishes for real w."""
    vals = [abs(2 * edge.inner(edge.coeffs, edge.grad_w(j))) for j in range(edge.dimension)]
    return float(max(vals))


@dataclass
class HypothesisReport:
    H2a: bool
    H2b: bool
    H2c: bool
    H3: bool
    simplicity_gap: float
    gradient_residual: float
    A_eigenvalues: list
    sign_A_times_e: float | None
    notes: list = field(default_factory=list)

    @property
    def all_hold(self) -> bool:
        return self.H2a and self.H2b and self.H2c and self.H3

    def first_failure(self) -> str | None:
        for name, ok in (("H2(a)", self.H2a), ("H2(b)", self.H2b), ("H2(c)", self.H2c), ("H3", self.H3)):
            if not ok:
                return name
        return None

    def to_json_dict(self) -> dict:
        return {
            "H2a": self.H2a,
            "H2b": self.H2b,
            "H2c": self.H2c,
            "H3": self.H3,
            "simplicity_gap": self.simplicity_gap,
            "gradient_residual": self.gradient_residual,
            "A_eigenvalues": list(self.A_eigenvalues),
            "sign_A_times_e": self.sign_A_times_e,
            "notes": list(self.notes),
        }


def certify_hypotheses(edge: BandEdge, A: EffectiveMassTensor, homog_eigs=None, tol_grad: float = 1e-6) -> HypothesisReport:
    """Report-only check of H2(a)-(c) and H3.

    ``homog_eigs`` is a sequence of homogenized eigenvalues (floats or objects
    with an ``e`` attribute); H3 holds when the lowest one (in the sgn(A)
    sense) satisfies sgn(A) e < 0.
    """
    from .bloch import tol_simple

    notes = []
    h2a = edge.simplicity_gap >= tol_simple(edge.energy)
    h2b = edge.gradient_residual < tol_grad
    sign = A.sign
    h2c = sign != 0
    if not h2c:
        notes.append("A is not sign definite; homogenization is not attempted")
    witness = None
    h3 = False
    if h2c and homog_eigs:
        es = [float(getattr(x, "e", x)) for x in homog_eigs]
        witness = min(sign * e for e in es)
        h3 = witness < 0
    elif h2c:
        notes.append("no homogenized eigenvalue available")
    if h2c and not h3:
        notes.append("no discrete homogenized eigenvalue with sgn(A) e < 0")
    return HypothesisReport(h2a, h2b, h2c, h3, edge.simplicity_gap, edge.gradient_residual, A.eigenvalues.tolist(), witness, notes)
