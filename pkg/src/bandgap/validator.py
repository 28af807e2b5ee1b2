"""Direct eigensolves of H_eps = -Lap + V(x) + eps^2 Q(eps x), gap-eigenvalue
extraction, convergence studies against the expansion, and variational checks.

Discretizations of the full operator:

* ``spectral`` (1D): plane waves exp(2 pi i q x / L) on the periodic supercell
  [-M, M), L = 2M.  V couples q to q + m L exactly, Q(eps x) through its FFT.
* ``fd2`` / ``fd4`` (1D and 2D): centered differences on [-M, M]^d with
  homogeneous Dirichlet data, ``n_fast`` points per unit cell.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy import stats
from scipy.linalg import lapack

from .bloch import BandEdge
from .errors import MemoryBudgetError, NumericalError
from .homogenized import envelope_decay_length
from .lattice import LocalizedPotential, PeriodicPotential, eval_periodic

log = logging.getLogger(__name__)

DEFAULT_MEMORY_BUDGET = 2 * 1024**3
SPURIOUS_MASS = 1e-3
BOUNDARY_SHELL = 0.1
Q_FOURIER_RTOL = 1e-14


def gap_contains(gap, mu: float, tol: float = 1e-9) -> bool:
    lo, hi = gap
    return lo + tol < mu < hi - tol


def domain_cells(eps: float, decay_length: float, c_dom: float = 20.0) -> int:
    """Half-width M (in cells) for a mode of envelope decay length ``decay_length``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    return int(math.ceil(c_dom * decay_length / eps))


@dataclass(eq=False)
class DirectProblem:
    V: PeriodicPotential
    Q: LocalizedPotential
    eps: float
    M: int
    n_fast: int = 32
    scheme: str = "spectral"
    pw_cutoff: int = 10
    memory_budget: float = DEFAULT_MEMORY_BUDGET
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.M < 1:
            raise ValueError("domain half-width M must be a positive number of cells")
        if self.scheme not in ("spectral", "fd2", "fd4"):
            raise ValueError(f"unknown direct scheme {self.scheme!r}")
        if self.V.dimension != self.Q.dimension:
            raise ValueError("V and Q must share the dimension")
        if self.dimension > 2:
            raise ValueError("direct validation supports d <= 2")
        if self.scheme == "spectral" and self.dimension != 1:
            raise ValueError("the spectral supercell discretization is one-dimensional; use fd2 or fd4 in 2D")
        if self.n_fast < 16:
            raise ValueError("n_fast must be at least 16 points per cell")

    @property
    def dimension(self) -> int:
        return self.V.dimension

    @property
    def length(self) -> int:
        return 2 * self.M

    # -- spectral supercell ----------------------------------------------------

    def q_max(self) -> int:
        # Bloch components sit at q = L (m + k); keep a half-cell margin of
        # envelope modes around the outermost one for both k = 0 and k = 1/2
        return self.length * (self.pw_cutoff + 1) - 1

    def modes(self) -> np.ndarray:
        qm = self.q_max()
        return np.arange(-qm, qm + 1)

    def q_fourier(self) -> dict:
        """Supercell Fourier coefficients of eps^2 Q(eps x), truncated at relative 1e-14."""
        if "qhat" in self._cache:
            return self._cache["qhat"]
        n = self.length * self.n_fast
        x = -self.M + np.arange(n) / self.n_fast
        vals = self.eps**2 * self.Q(self.eps * x)
        coef = np.fft.fft(vals) / n * np.exp(2j * np.pi * np.fft.fftfreq(n, d=1.0 / n) * self.M / self.length)
        coef = np.fft.fftshift(coef)
        t = np.arange(n) - n // 2
        peak = np.max(np.abs(coef)) if coef.size else 0.0
        keep = np.abs(coef) > Q_FOURIER_RTOL * peak if peak > 0 else np.zeros(n, bool)
        # an even defect has real coefficients; drop round-off imaginary parts
        coef = np.where(np.abs(coef.imag) > Q_FOURIER_RTOL * peak, coef, coef.real + 0j)
        out = {int(tt): complex(c) for tt, c in zip(t[keep], coef[keep])}
        self._cache["qhat"] = out
        return out

    # -- real-space grid --------------------------------------------------------

    def grid_axis(self) -> np.ndarray:
        """Sample coordinates along one axis (interior Dirichlet nodes for fd)."""
        if self.scheme == "spectral":
            return -self.M + np.arange(self.length * self.n_fast) / self.n_fast
        n = self.length * self.n_fast
        return -self.M + np.arange(1, n) / self.n_fast

    def grid_points(self) -> np.ndarray:
        ax = self.grid_axis()
        mesh = np.meshgrid(*([ax] * self.dimension), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    @property
    def size(self) -> int:
        if self.scheme == "spectral":
            return len(self.modes())
        return len(self.grid_axis()) ** self.dimension

    def bandwidth(self) -> int:
        """Largest |row - column| among the nonzeros of the discrete operator."""
        if self.scheme == "spectral":
            return max(self.length * self.V.cutoff, max((abs(t) for t in self.q_fourier()), default=0), 1)
        reach = 2 if self.scheme == "fd4" else 1
        return reach * len(self.grid_axis()) ** (self.dimension - 1)

    def is_real(self) -> bool:
        if self.scheme != "spectral":
            return True
        coeffs = list(self.V.coeffs.values()) + list(self.q_fourier().values())
        return all(c.imag == 0 for c in coeffs)

    def banded_bytes(self) -> float:
        itemsize = 8 if self.is_real() else 16
        return float((3 * self.bandwidth() + 1) * self.size * itemsize)

    def sparse_lu_bytes(self) -> float:
        """Rough upper bound for a general sparse LU of the same matrix."""
        n = self.size
        if self.scheme == "spectral":
            return 32.0 * n * self.bandwidth()
        if self.dimension == 1:
            return 128.0 * n * self.bandwidth()
        return 96.0 * n * self.bandwidth()

    def estimated_bytes(self) -> float:
        """Memory of the factorization shift-invert will use: banded when it fits, else sparse."""
        banded = self.banded_bytes()
        return banded if banded <= self.memory_budget else min(banded, self.sparse_lu_bytes())

    def check_budget(self):
        need = self.estimated_bytes()
        if need > self.memory_budget:
            raise MemoryBudgetError(
                f"direct problem (eps={self.eps}, M={self.M}, n={self.size}) needs about {need / 1024**2:.0f} MiB; "
                f"budget is {self.memory_budget / 1024**2:.0f} MiB"
            )

    # -- vectors ----------------------------------------------------------------

    def weight(self) -> float:
        """Weight turning the discrete 2-norm into the L^2 norm."""
        if self.scheme == "spectral":
            return float(self.length)
        return (1.0 / self.n_fast) ** self.dimension

    def norm(self, v) -> float:
        return float(np.sqrt(self.weight() * np.real(np.vdot(v, v))))

    def inner(self, u, v) -> complex:
        return complex(self.weight() * np.vdot(u, v))

    def to_real_space(self, v) -> np.ndarray:
        """Samples on grid_points()."""
        if self.scheme != "spectral":
            return np.asarray(v)
        n = self.length * self.n_fast
        qm = self.q_max()
        if 2 * qm + 1 > n:
            raise ValueError("n_fast too small to sample the supercell basis")
        full = np.zeros(n, dtype=complex)
        full[self.modes() % n] = v
        x0 = -self.M
        # basis functions are exp(2 pi i q x / L) with x = x0 + j / n_fast
        phase = np.exp(2j * np.pi * self.modes() * x0 / self.length)
        full[self.modes() % n] = v * phase
        vals = np.fft.ifft(full) * n
        return vals

    def from_real_space(self, samples) -> np.ndarray:
        """Coefficients (spectral) or grid vector (fd) from samples on grid_points()."""
        samples = np.asarray(samples)
        if self.scheme != "spectral":
            return samples.astype(float)
        n = self.length * self.n_fast
        coef = np.fft.fft(samples) / n
        phase = np.exp(-2j * np.pi * self.modes() * (-self.M) / self.length)
        return coef[self.modes() % n] * phase

    def boundary_mass(self, v) -> float:
        """Fraction of |u|^2 in the outer 10% shell of the domain."""
        vals = np.abs(self.to_real_space(v)) ** 2
        pts = self.grid_points()
        shell = np.max(np.abs(pts), axis=1) > (1 - BOUNDARY_SHELL) * self.M
        total = np.sum(vals)
        return float(np.sum(vals[shell]) / total) if total > 0 else 0.0


def _fd_laplacian_1d(n: int, h: float, order: int) -> sp.csr_matrix:
    if order == 2:
        return sp.diags([np.ones(n - 1), -2 * np.ones(n), np.ones(n - 1)], [-1, 0, 1], format="csr") / h**2
    c = [-1 / 12, 4 / 3, -5 / 2, 4 / 3, -1 / 12]
    return sp.diags([c[0] * np.ones(n - 2), c[1] * np.ones(n - 1), c[2] * np.ones(n), c[3] * np.ones(n - 1), c[4] * np.ones(n - 2)], [-2, -1, 0, 1, 2], format="csr") / h**2


def assemble_direct(problem: DirectProblem):
    """Sparse Hermitian matrix of H_eps in the problem's discretization."""
    problem.check_budget()
    if "matrix" in problem._cache:
        return problem._cache["matrix"]
    if problem.scheme == "spectral":
        L = problem.length
        q = problem.modes()
        n = len(q)
        rows, cols, vals = [np.arange(n)], [np.arange(n)], [(2 * np.pi * q / L) ** 2 + 0j]
        couplings = {}
        for z, c in problem.V.coeffs.items():
            couplings[z[0] * L] = couplings.get(z[0] * L, 0) + c
        for t, c in problem.q_fourier().items():
            couplings[t] = couplings.get(t, 0) + c
        for t, c in couplings.items():
            # row q + t, column q
            src = np.arange(max(0, -t), min(n, n - t))
            rows.append(src + t)
            cols.append(src)
            vals.append(np.full(len(src), c, dtype=complex))
        H = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
        if np.max(np.abs(H.data.imag), initial=0.0) == 0.0:
            H = sp.csr_matrix(H.real)
    else:
        order = 2 if problem.scheme == "fd2" else 4
        ax = problem.grid_axis()
        m = len(ax)
        lap1 = _fd_laplacian_1d(m, 1.0 / problem.n_fast, order)
        if problem.dimension == 1:
            lap = lap1
        else:
            eye = sp.identity(m, format="csr")
            lap = sp.kron(lap1, eye, format="csr") + sp.kron(eye, lap1, format="csr")
        pts = problem.grid_points()
        pot = eval_periodic(problem.V, pts) + problem.eps**2 * problem.Q(problem.eps * pts)
        H = sp.csr_matrix(-lap + sp.diags(pot))
    problem._cache["matrix"] = H
    return H


@dataclass(eq=False)
class DefectModeResult:
    mu: float
    u: np.ndarray
    gap: tuple
    distance_to_edge: float
    boundary_mass: float
    residual: float
    problem: DirectProblem = field(repr=False)

    def to_json_dict(self) -> dict:
        return {
            "mu": self.mu,
            "gap": [float(g) for g in self.gap],
            "distance_to_edge": self.distance_to_edge,
            "boundary_mass": self.boundary_mass,
            "residual": self.residual,
            "eps": self.problem.eps,
            "M": self.problem.M,
            "scheme": self.problem.scheme,
        }

    def to_csv(self, path) -> None:
        vals = self.problem.to_real_space(self.u).real
        pts = self.problem.grid_points()
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"x{j + 1}" for j in range(pts.shape[1])] + ["u"])
            for p, v in zip(pts, vals):
                writer.writerow([repr(float(c)) for c in p] + [repr(float(v))])


def shift_invert_operator(H, sigma: float, memory_budget: float = DEFAULT_MEMORY_BUDGET) -> spla.LinearOperator:
    """(H - sigma)^{-1} as an operator.

    Banded LAPACK LU (gbtrf) when the band storage fits the budget: the
    supercell matrix couples q to q +- L, and a banded factorization is far
    cheaper than general sparse LU on that pattern.  Otherwise SuperLU.
    Raises RuntimeError for an exactly singular shift.
    """
    n = H.shape[0]
    M = (H - sigma * sp.identity(n, format="csr")).tocoo()
    real = not np.iscomplexobj(M.data) or np.all(M.data.imag == 0)
    data = M.data.real if real else M.data
    b = int(np.max(np.abs(M.row - M.col), initial=0))
    itemsize = 8 if real else 16
    if (3 * b + 1) * n * itemsize <= memory_budget:
        ab = np.zeros((3 * b + 1, n), dtype=float if real else complex)
        ab[2 * b + M.row - M.col, M.col] = data
        trf, trs = (lapack.dgbtrf, lapack.dgbtrs) if real else (lapack.zgbtrf, lapack.zgbtrs)
        lu, piv, info = trf(ab, b, b)
        if info != 0:
            raise RuntimeError(f"banded LU of H - sigma failed (info={info})")

        def solve(v):
            dtype = float if real and not np.iscomplexobj(v) else complex
            if dtype is complex and real:
                re, _ = trs(lu, b, b, np.ascontiguousarray(v.real), piv)
                im, _ = trs(lu, b, b, np.ascontiguousarray(v.imag), piv)
                return re + 1j * im
            x, _ = trs(lu, b, b, np.asarray(v, dtype=dtype), piv)
            return x

        return spla.LinearOperator((n, n), matvec=solve, dtype=float if real else complex)
    lu = spla.splu(M.tocsc())
    return spla.LinearOperator((n, n), matvec=lu.solve, dtype=lu.U.dtype)


@dataclass
class GapSearch:
    accepted: list
    spurious: list
    outside: list


def find_gap_eigenvalues(problem: DirectProblem, gap, sigma: float, n_want: int = 4, E_star: float | None = None) -> GapSearch:
    """Eigenpairs near ``sigma`` by shift-invert; keep those strictly inside ``gap``.

    Modes with boundary mass above 1e-3 are set aside as spurious edge-of-domain
    modes.  Accepted pairs are sorted by distance to sigma.
    """
    H = assemble_direct(problem)
    n = H.shape[0]
    k = min(n_want, n - 2)
    v0 = np.ones(n) / np.sqrt(n)
    E_ref = sigma if E_star is None else E_star
    vals = vecs = None
    for attempt, shift in enumerate((sigma, sigma + 1e-8 * max(abs(E_ref), 1.0))):
        try:
            op = shift_invert_operator(H, shift, problem.memory_budget)
            vals, vecs = spla.eigsh(H, k=k, sigma=shift, which="LM", v0=v0, tol=1e-14, OPinv=op)
            break
        except (RuntimeError, spla.ArpackError) as exc:
            log.warning("shift-invert at sigma=%.15g failed (%s); perturbing", shift, exc)
    if vals is None:
        raise NumericalError(f"shift-invert factorization failed at sigma={sigma:.15g} and its perturbation")
    order = np.argsort(np.abs(vals - sigma))
    accepted, spurious, outside = [], [], []
    for i in order:
        mu = float(vals[i])
        v = vecs[:, i] / problem.norm(vecs[:, i])
        # deterministic sign: largest real-space sample positive
        samples = problem.to_real_space(v).real
        if samples[np.argmax(np.abs(samples))] < 0:
            v = -v
        if not gap_contains(gap, mu):
            outside.append(mu)
            continue
        bm = problem.boundary_mass(v)
        resid = problem.norm(H @ v - mu * v)
        result = DefectModeResult(mu, v, tuple(gap), (E_star - mu) if E_star is not None else float("nan"), bm, resid, problem)
        (spurious if bm > SPURIOUS_MASS else accepted).append(result)
    return GapSearch(accepted, spurious, outside)


def rayleigh_quotient(problem: DirectProblem, u, E_ref: float) -> float:
    """<u, (H - E_ref) u> / <u, u> in the problem's discretization."""
    u = np.asarray(u)
    denom = np.real(np.vdot(u, u))
    if denom == 0:
        raise ValueError("Rayleigh quotient of the zero function")
    H = assemble_direct(problem)
    return float(np.real(np.vdot(u, H @ u)) / denom - E_ref)


# -- convergence ----------------------------------------------------------------


def fit_slope(eps, errors, confidence: float = 0.95) -> dict:
    """Least-squares slope of log(error) against log(eps) with a t-interval."""
    eps = np.asarray(eps, dtype=float)
    err = np.asarray(errors, dtype=float)
    ok = err > 0
    if ok.sum() < 2:
        return {"slope": float("nan"), "intercept": float("nan"), "ci": [float("nan"), float("nan")]}
    res = stats.linregress(np.log(eps[ok]), np.log(err[ok]))
    dof = ok.sum() - 2
    if dof > 0:
        half = stats.t.ppf(0.5 + confidence / 2, dof) * res.stderr
    else:
        half = 0.0
    return {"slope": float(res.slope), "intercept": float(res.intercept), "ci": [float(res.slope - half), float(res.slope + half)]}


@dataclass
class ConvergenceReport:
    eps: list
    N: int
    E_star: float
    e_AQ: float
    mu_direct: list
    mu_N: list
    error_leading: list
    error_mu3: list
    error_mu_N: list
    eigenfunction_error: list
    residual: list
    overlap: list
    boundary_mass: list
    slopes: dict
    warnings: list = field(default_factory=list)
    exact_regime: bool = False

    def to_json_dict(self) -> dict:
        return {
            "eps": self.eps,
            "N": self.N,
            "E_star": self.E_star,
            "e_AQ": self.e_AQ,
            "mu_direct": self.mu_direct,
            "mu_N": self.mu_N,
            "error_leading": self.error_leading,
            "error_mu3": self.error_mu3,
            "error_mu_N": self.error_mu_N,
            "eigenfunction_error": self.eigenfunction_error,
            "residual": self.residual,
            "overlap": self.overlap,
            "boundary_mass": self.boundary_mass,
            "slopes": self.slopes,
            "warnings": self.warnings,
            "exact_regime": self.exact_regime,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True)

    def to_csv(self, path) -> None:
        cols = ["eps", "mu_direct", "mu_N", "error_leading", "error_mu3", "error_mu_N", "eigenfunction_error", "residual", "overlap", "boundary_mass"]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(cols)
            for i in range(len(self.eps)):
                writer.writerow([repr(float(getattr(self, c)[i])) for c in cols])
            for name, s in sorted(self.slopes.items()):
                writer.writerow([f"slope_{name}", repr(s["slope"]), repr(s["ci"][0]), repr(s["ci"][1])])


def _check_eps_list(eps_list):
    eps = [float(e) for e in eps_list]
    if len(eps) < 3:
        raise ValueError("a convergence study needs at least 3 eps values")
    if any(e <= 0 for e in eps) or any(b >= a for a, b in zip(eps, eps[1:])):
        raise ValueError("eps values must be positive and strictly decreasing")
    return eps


def direct_problem_for(state, eps: float, c_dom: float = 20.0, pw_cutoff: int = 10, n_fast: int = 32, scheme: str = "spectral", memory_budget: float = DEFAULT_MEMORY_BUDGET) -> DirectProblem:
    return direct_problem(state.edge.potential, state.problem.Q, state.problem.A, state.e, eps, c_dom, pw_cutoff, n_fast, scheme, memory_budget)


def direct_problem(V, Q, A, e: float, eps: float, c_dom: float = 20.0, pw_cutoff: int = 10, n_fast: int = 32, scheme: str = "spectral", memory_budget: float = DEFAULT_MEMORY_BUDGET) -> DirectProblem:
    """Direct problem sized for a homogenized pair with mass A and eigenvalue e."""
    M = domain_cells(eps, envelope_decay_length(A, e), c_dom)
    return DirectProblem(V, Q, eps, M, n_fast, scheme, pw_cutoff, memory_budget)


def expansion_vector(state, problem: DirectProblem, N: int) -> np.ndarray:
    """u^(N) in the direct discretization (coefficients or grid values)."""
    from .multiscale import assemble_approximation

    pts = problem.grid_points()
    vals, _ = assemble_approximation(state, problem.eps, N, pts)
    return problem.from_real_space(vals)


def solve_defect_mode(state, eps: float, gap, **kw) -> DefectModeResult:
    """Direct gap eigenpair closest to E_* + eps^2 e."""
    problem = direct_problem_for(state, eps, **kw)
    sigma = state.edge.energy + eps**2 * state.e
    search = find_gap_eigenvalues(problem, gap, sigma, 4, state.edge.energy)
    if not search.accepted:
        raise NumericalError(f"no localized gap eigenvalue near sigma={sigma:.12g} at eps={eps} (outside gap: {search.outside}, spurious: {len(search.spurious)})")
    return search.accepted[0]


def convergence_study(state, gap, eps_list, N: int = 4, **kw) -> ConvergenceReport:
    """Compare direct gap eigenpairs with the expansion over a decreasing eps list."""
    eps = _check_eps_list(eps_list)
    if N > state.built:
        raise ValueError(f"expansion built through order {state.built}, study asks for N={N}")
    from .multiscale import mu_total

    E = state.edge.energy
    rows = {k: [] for k in ("mu_d", "mu_N", "lead", "mu3", "muN", "ef", "res", "ov", "bm")}
    for ep in eps:
        mode = solve_defect_mode(state, ep, gap, **kw)
        problem = mode.problem
        H = assemble_direct(problem)
        mu_N = mu_total(state, ep, N)
        uN = expansion_vector(state, problem, N)
        nN = problem.norm(uN)
        # eigenvectors carry an arbitrary unit phase (i at k = 1/2 in a real basis)
        ov = problem.inner(mode.u, uN) / nN
        phase = ov / abs(ov) if abs(ov) > 0 else 1.0
        rows["mu_d"].append(mode.mu)
        rows["mu_N"].append(mu_N)
        rows["lead"].append(abs(mode.mu - (E + ep**2 * state.e)))
        rows["mu3"].append(abs(mode.mu - mu_total(state, ep, min(3, state.built))))
        rows["muN"].append(abs(mode.mu - mu_N))
        rows["ef"].append(problem.norm(phase * mode.u - uN / nN))
        rows["res"].append(problem.norm(H @ uN - mu_N * uN) / nN)
        rows["ov"].append(abs(ov))
        rows["bm"].append(mode.boundary_mass)
    slopes = {
        "leading": fit_slope(eps, rows["lead"]),
        "mu3": fit_slope(eps, rows["mu3"]),
        "mu_N": fit_slope(eps, rows["muN"]),
        "eigenfunction": fit_slope(eps, rows["ef"]),
        "residual": fit_slope(eps, rows["res"]),
    }
    warnings = []
    for name, key in (("leading", "lead"), ("residual", "res")):
        seq = rows[key]
        if any(b >= a for a, b in zip(seq, seq[1:])):
            warnings.append(f"{name} errors are not monotone in eps; the direct solve may be under-resolved")
    exact = max(rows["lead"]) < 1e-11 * max(1.0, abs(E))
    if exact:
        warnings.append("exact regime: errors at the round-off floor")
    return ConvergenceReport(eps, N, E, state.e, rows["mu_d"], rows["mu_N"], rows["lead"], rows["mu3"], rows["muN"], rows["ef"], rows["res"], rows["ov"], rows["bm"], slopes, warnings, exact)


def residual_ladder(state, eps_list, N: int, **kw) -> tuple[list, dict]:
    """|(H_eps - mu^(N)) u^(N)| / |u^(N)| over eps, with its fitted slope."""
    from .multiscale import mu_total

    eps = _check_eps_list(eps_list)
    out = []
    for ep in eps:
        problem = direct_problem_for(state, ep, **kw)
        H = assemble_direct(problem)
        uN = expansion_vector(state, problem, N)
        out.append(problem.norm(H @ uN - mu_total(state, ep, N) * uN) / problem.norm(uN))
    return out, fit_slope(eps, out)


# -- variational checks --------------------------------------------------------------


@dataclass
class VariationalChain:
    eps: list
    two_term: list
    one_term: list
    holds: list
    extrapolated_two_term: float
    extrapolated_one_term: float
    e_AQ: float
    e_IQ: float
    boundary_case: bool = False

    def to_json_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("eps", "two_term", "one_term", "holds", "extrapolated_two_term", "extrapolated_one_term", "e_AQ", "e_IQ", "boundary_case")}


def trial_energies(state, pair_I, eps: float, c_dom: float = 20.0, pw_cutoff: int = 10, n_fast: int = 32) -> tuple[float, float]:
    """(E[u2], E[u1]) for u1 = F_IQ(eps x) w(x), u2 = F_AQ(eps x) w(x) + 2 eps grad_y F_AQ(eps x) . chi(x)."""
    from .homogenized import interpolate
    from .lattice import synthesize
    from .multiscale import TwoScaleField, corrector_term

    if state.dimension != 1:
        raise ValueError("the variational chain is evaluated with the 1D spectral supercell")
    ell = max(envelope_decay_length(state.problem.A, state.e), envelope_decay_length(np.eye(1), pair_I.e))
    problem = DirectProblem(state.edge.potential, state.problem.Q, eps, domain_cells(eps, ell, c_dom), n_fast, "spectral", pw_cutoff)
    pts = problem.grid_points()
    G = state.edge.wavevectors

    def sample(field_, hp):
        cells = synthesize(field_.cells, G, pts)
        env = interpolate(hp, np.stack(field_.envelopes), eps * pts)
        return np.real(np.sum(cells * env, axis=1))

    u2f = TwoScaleField.product(state.w, state.F0) + corrector_term(state, state.F0).scale(eps)
    u1f = TwoScaleField.product(state.w, pair_I.F)
    E = state.edge.energy
    e2 = rayleigh_quotient(problem, problem.from_real_space(sample(u2f, state.problem)), E)
    e1 = rayleigh_quotient(problem, problem.from_real_space(sample(u1f, pair_I.problem)), E)
    return e2, e1


def variational_chain(state, pair_I, eps_list=(0.2, 0.1, 0.05), **kw) -> VariationalChain:
    """Energies of the two-term and one-term trial functions and their eps^2 limits.

    The chain E[u2] < E[u1] < 0 is checked at every eps; E/eps^2 is
    extrapolated to eps -> 0 by a fit c0 + c2 eps^2.
    """
    eps = _check_eps_list(eps_list)
    two, one, holds = [], [], []
    for ep in eps:
        e2, e1 = trial_energies(state, pair_I, ep, **kw)
        two.append(e2)
        one.append(e1)
        holds.append(bool(e2 < e1 < 0))
    x = np.asarray(eps) ** 2
    c2 = np.polyfit(x, np.asarray(two) / x, 1)[1]
    c1 = np.polyfit(x, np.asarray(one) / x, 1)[1]
    boundary = bool(np.allclose(state.problem.A, np.eye(state.dimension), atol=1e-8) and np.max(np.abs(state.chi), initial=0.0) < 1e-12)
    return VariationalChain(eps, two, one, holds, float(c2), float(c1), state.e, pair_I.e, boundary)


def averaging_check(p: PeriodicPotential, G: LocalizedPotential, eps_list, n: int | None = None, nodes: int = 32) -> dict:
    """Error of replacing p(x) by its mean under a slowly varying weight G(eps x).

    Returns eps, |int p(x) G(eps x) dx - eps^{-1} mean(p) int G| per eps, the
    fitted slope and the local slopes between consecutive eps.  One dimension;
    integrals by composite Gauss-Legendre on unit cells, with the cells cut at
    the edges of G's support.
    """
    if p.dimension != 1 or G.dimension != 1:
        raise ValueError("averaging_check is one-dimensional")
    eps = [float(e) for e in eps_list]
    if any(e <= 0 for e in eps):
        raise ValueError("eps must be positive")
    gx, gw = np.polynomial.legendre.leggauss(nodes)
    pbar = p.coefficient((0,)).real
    errors = []
    c = G.center[0]
    R = G.profile_radius()
    for ep in eps:
        lo, hi = (c - R) / ep, (c + R) / ep
        breaks = np.unique(np.concatenate([np.arange(math.floor(lo), math.ceil(hi) + 1), [lo, hi]]))
        breaks = breaks[(breaks >= lo) & (breaks <= hi)]
        a, b = breaks[:-1], breaks[1:]
        mid, half = 0.5 * (a + b), 0.5 * (b - a)
        x = (mid[:, None] + half[:, None] * gx[None, :]).ravel()
        wts = (half[:, None] * gw[None, :]).ravel()
        errors.append(abs(float(np.sum(wts * (p(x) - pbar) * G(ep * x)))))
    fit = fit_slope(eps, errors)
    local = [math.log(errors[i] / errors[i + 1]) / math.log(eps[i] / eps[i + 1]) if errors[i] > 0 and errors[i + 1] > 0 else float("inf") for i in range(len(eps) - 1)]
    return {"eps": eps, "errors": errors, "slope": fit["slope"], "ci": fit["ci"], "local_slopes": local, "expected_order": n}
