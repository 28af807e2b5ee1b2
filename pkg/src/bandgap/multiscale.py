"""Two-scale expansion  u = sum eps^n U_n(x, eps x),  mu = E_* + sum eps^n mu_n.

Every U_n is a finite sum of separable products c(x) g(y).  Writing
chi_j = L_*^{-1} d_j w, each order has the shape

    U_m = w F_m + 2 chi_j D_j F_{m-1} + P_m,       <w, P_m(., y)> = 0,

and the order-n equation  L_* U_n = 2 grad_x.grad_y U_{n-1} - (-Lap_y + Q - e) U_{n-2}
+ sum_{j>=3} mu_j U_{n-j}  is split into

    K_n   = 2 grad_x.grad_y P_{n-1} - (-Lap_y + Q - e)(2 chi.D F_{n-3} + P_{n-2})
            + sum_{j=3}^{n-1} mu_j U_{n-j}
    mu_n  = -<F_0, <w, K_n>>
    F_n-2 = (L_AQ - e)^{-1} [<w, K_n> + mu_n F_0]          (orthogonal to F_0)
    P_n   = L_*^{-1} [ -Lop[F_n-2] + K_n + mu_n w F_0 ]

with  Lop[G] = -4 d_j chi_l D_j D_l G + w (-Lap_y + Q - e) G.  The expansion is
closed at order N by F_{N-1} = F_N = 0.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .bloch import BandEdge, apply_Lstar_inverse
from .effmass import corrector_cells, mu1_solvability_integral
from .errors import GaugeError, NumericalError, SolvabilityError
from .homogenized import HomogenizedEigenpair, HomogenizedProblem, apply_LAQ_inverse, interpolate
from .lattice import synthesize

log = logging.getLogger(__name__)

COMPRESS_RTOL = 1e-13
SOLV_LEDGER_TOL = 1e-7


@dataclass(frozen=True)
class SeparableTerm:
    """One product c(x) g(y): plane-wave coefficients of c and grid values of g."""

    cell: np.ndarray
    envelope: np.ndarray
    derivative: tuple | None = None


@dataclass
class TwoScaleField:
    """sum_r c_r(x) g_r(y) with cells as columns (n_pw, r) and envelopes as rows (r, n_y)."""

    cells: np.ndarray
    envelopes: np.ndarray

    def __post_init__(self):
        self.cells = np.asarray(self.cells, dtype=complex)
        self.envelopes = np.asarray(self.envelopes, dtype=float)
        if self.cells.ndim != 2 or self.envelopes.ndim != 2 or self.cells.shape[1] != self.envelopes.shape[0]:
            raise ValueError(f"incompatible factor shapes {self.cells.shape} and {self.envelopes.shape}")

    @classmethod
    def zero(cls, n_pw: int, n_y: int) -> "TwoScaleField":
        return cls(np.zeros((n_pw, 0), complex), np.zeros((0, n_y)))

    @classmethod
    def product(cls, cell, envelope) -> "TwoScaleField":
        return cls(np.asarray(cell).reshape(-1, 1), np.asarray(envelope).reshape(1, -1))

    @property
    def rank(self) -> int:
        return self.cells.shape[1]

    def terms(self) -> list:
        return [SeparableTerm(self.cells[:, r].copy(), self.envelopes[r].copy()) for r in range(self.rank)]

    def __add__(self, other: "TwoScaleField") -> "TwoScaleField":
        return TwoScaleField(np.hstack([self.cells, other.cells]), np.vstack([self.envelopes, other.envelopes]))

    def __neg__(self):
        return TwoScaleField(-self.cells, self.envelopes)

    def __sub__(self, other):
        return self + (-other)

    def scale(self, s: float) -> "TwoScaleField":
        return TwoScaleField(s * self.cells, self.envelopes)

    def map_cells(self, fn) -> "TwoScaleField":
        return TwoScaleField(fn(self.cells), self.envelopes)

    def map_envelopes(self, fn) -> "TwoScaleField":
        if self.rank == 0:
            return self
        return TwoScaleField(self.cells, fn(self.envelopes.T).T)

    def cell_pairing(self, w: np.ndarray) -> np.ndarray:
        """Envelope <w, U(., y)> (complex in general, real for real fields)."""
        return (np.conj(w) @ self.cells) @ self.envelopes

    def project_out(self, w: np.ndarray) -> "TwoScaleField":
        """Remove the w-component of every cell factor."""
        return TwoScaleField(self.cells - np.outer(w, np.conj(w) @ self.cells), self.envelopes)

    def compress(self, rtol: float = COMPRESS_RTOL) -> "TwoScaleField":
        """Minimal-rank re-factorization keeping real linear combinations of cells."""
        if self.rank == 0:
            return self
        stacked = np.vstack([self.cells.real, self.cells.imag])
        q, r = np.linalg.qr(stacked)
        core = r @ self.envelopes
        u, s, vt = np.linalg.svd(core, full_matrices=False)
        if s.size == 0 or s[0] == 0:
            return TwoScaleField.zero(self.cells.shape[0], self.envelopes.shape[1])
        keep = int(np.sum(s > rtol * s[0]))
        n = self.cells.shape[0]
        qc = q[:n] + 1j * q[n:]
        return TwoScaleField(qc @ (u[:, :keep] * s[:keep]), vt[:keep])

    def norm(self, weight: float) -> float:
        """L^2 norm over cell x box (Parseval in x, node weights in y)."""
        if self.rank == 0:
            return 0.0
        gc = np.conj(self.cells).T @ self.cells
        ge = self.envelopes @ self.envelopes.T
        return float(np.sqrt(max(weight * np.real(np.sum(gc * ge)), 0.0)))

    def sample(self, wavevectors, x, y_index=None) -> np.ndarray:
        """Values on the tensor grid (cell points x) x (envelope nodes), shape (n_x, n_y)."""
        cells = synthesize(self.cells, wavevectors, x)
        env = self.envelopes if y_index is None else self.envelopes[:, y_index]
        return (cells @ env).real


@dataclass(eq=False)
class MultiscaleExpansion:
    edge: BandEdge
    homog: HomogenizedEigenpair
    order: int = 4
    chi: np.ndarray = None
    F: dict = field(default_factory=dict)
    P: dict = field(default_factory=dict)
    mu: dict = field(default_factory=dict)
    K: dict = field(default_factory=dict)
    ledger: list = field(default_factory=list)
    built: int = -1

    def __post_init__(self):
        if self.homog.problem.scheme != "spectral":
            raise ValueError("the multiscale expansion needs the spectral envelope scheme (exact derivative composition)")
        if self.homog.problem.dimension != self.edge.dimension:
            raise ValueError("edge and homogenized problem live in different dimensions")
        if not 2 <= self.order <= 8:
            raise ValueError("expansion order N must lie in 2..8")

    @property
    def problem(self) -> HomogenizedProblem:
        return self.homog.problem

    @property
    def dimension(self) -> int:
        return self.edge.dimension

    @property
    def e(self) -> float:
        return self.homog.e

    @property
    def F0(self) -> np.ndarray:
        return self.homog.F

    @property
    def w(self) -> np.ndarray:
        return self.edge.coeffs

    @property
    def reference_scale(self) -> float:
        """|Lap F_0| + |Q F_0| + |e|: size of the leading-order terms for unit U_0."""
        p = self.problem
        lap = sum(p.derivative(self.F0, j, 2) for j in range(self.dimension))
        return p.norm(lap) + p.norm(p.q_values() * self.F0) + abs(self.e)

    def zero_field(self) -> TwoScaleField:
        return TwoScaleField.zero(self.edge.n_pw, self.problem.size)

    def envelope(self, m: int) -> np.ndarray:
        """F_m, zero when not (yet) determined (closure convention)."""
        if m < 0 or m not in self.F:
            return np.zeros(self.problem.size)
        return self.F[m]

    def U(self, n: int, closure: int | None = None) -> TwoScaleField:
        """U_n = w F_n + 2 chi.D F_{n-1} + P_n with F_m = 0 for m > closure - 2."""
        closure = self.built if closure is None else closure

        def env(m):
            return self.envelope(m) if m <= closure - 2 else np.zeros(self.problem.size)

        field_ = self.zero_field()
        Fn = env(n)
        if np.any(Fn):
            field_ = field_ + TwoScaleField.product(self.w, Fn)
        field_ = field_ + corrector_term(self, env(n - 1))
        if n in self.P:
            field_ = field_ + self.P[n]
        return field_.compress()

    def U_norms(self) -> dict:
        return {n: self.U(n).norm(self.problem.weight) for n in range(self.built + 1)}

    def term_counts(self) -> dict:
        return {n: self.U(n).rank for n in range(self.built + 1)}

    def max_defect(self) -> float:
        return max((entry["defect"] for entry in self.ledger), default=0.0)

    def to_json_dict(self) -> dict:
        return {
            "order": self.order,
            "built_through": self.built,
            "E_star": self.edge.energy,
            "e_AQ": self.e,
            "mu": {str(n): self.mu[n] for n in sorted(self.mu)},
            "term_counts": {str(n): c for n, c in self.term_counts().items()},
            "U_norms": {str(n): v for n, v in self.U_norms().items()},
            "solvability_defects": self.ledger,
            "max_solvability_defect": self.max_defect(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True)


# -- envelope calculus ----------------------------------------------------------


def _neg_laplacian(problem: HomogenizedProblem, G: np.ndarray) -> np.ndarray:
    kap = np.meshgrid(*([problem.wavenumbers()] * problem.dimension), indexing="ij")
    return problem._fourier_multiply(G, sum(k**2 for k in kap))


def schrodinger_shift(state: MultiscaleExpansion, G: np.ndarray) -> np.ndarray:
    """(-Lap_y + Q - e) G; accepts columns."""
    G = np.asarray(G)
    q = state.problem.q_values().reshape((-1,) + (1,) * (G.ndim - 1))
    return _neg_laplacian(state.problem, G) + (q - state.e) * G


def corrector_term(state: MultiscaleExpansion, G: np.ndarray) -> TwoScaleField:
    """2 sum_j chi_j(x) D_j G(y)."""
    if not np.any(G):
        return state.zero_field()
    d = state.dimension
    envs = np.stack([state.problem.derivative(G, j) for j in range(d)])
    return TwoScaleField(2 * state.chi, envs)


def mixed_gradient(state: MultiscaleExpansion, U: TwoScaleField) -> TwoScaleField:
    """2 grad_x . grad_y U = 2 sum_j (d_j c) (D_j g)."""
    if U.rank == 0:
        return state.zero_field()
    out = state.zero_field()
    for j in range(state.dimension):
        out = out + TwoScaleField(2 * state.edge.derivative(U.cells, j), state.problem.derivative(U.envelopes.T, j).T)
    return out.compress()


def envelope_operator(state: MultiscaleExpansion, U: TwoScaleField) -> TwoScaleField:
    """(-Lap_y + Q - e) applied to the envelope factors."""
    return U.map_envelopes(lambda E: schrodinger_shift(state, E))


def L_operator(state: MultiscaleExpansion, G: np.ndarray) -> TwoScaleField:
    """Lop[G] = -4 d_j chi_l D_j D_l G + w (-Lap_y + Q - e) G."""
    if not np.any(G):
        return state.zero_field()
    d = state.dimension
    cells, envs = [], []
    for j in range(d):
        for l in range(d):
            cells.append(-4 * state.edge.derivative(state.chi[:, l], j))
            envs.append(state.problem.mixed_derivative(G, j, l))
    cells.append(state.w)
    envs.append(schrodinger_shift(state, G))
    return TwoScaleField(np.stack(cells, axis=1), np.stack(envs))


def Lstar_inverse_field(state: MultiscaleExpansion, rhs: TwoScaleField, label: str) -> TwoScaleField:
    """Solve L_* P = rhs for the w-orthogonal part P.

    The w-component of rhs, sum_r <w, c_r> g_r, must vanish as a function of y;
    its size relative to max(|rhs|, reference_scale) is entered in the
    solvability ledger, so a right-hand side that cancels to round-off is not
    judged against itself.
    """
    weight = state.problem.weight
    rhs = rhs.compress()
    if rhs.rank == 0:
        state.ledger.append({"step": label, "operator": "L_*", "defect": 0.0})
        return state.zero_field()
    kernel_part = rhs.cell_pairing(state.w)
    scale = max(rhs.norm(weight), state.reference_scale)
    defect = float(np.sqrt(weight * np.sum(np.abs(kernel_part) ** 2)) / scale)
    state.ledger.append({"step": label, "operator": "L_*", "defect": defect})
    if defect > SOLV_LEDGER_TOL:
        raise SolvabilityError(f"{label}: w-component of the right-hand side is {defect:.2e} of its norm (expected < {SOLV_LEDGER_TOL:.0e})")
    perp = rhs.project_out(state.w)
    ref = float(np.max(np.linalg.norm(perp.cells, axis=0)))
    sol = TwoScaleField(apply_Lstar_inverse(state.edge, perp.cells, reference_norm=ref), perp.envelopes)
    return sol.compress()


def _real_scalar(z, what: str) -> float:
    z = complex(z)
    if abs(z.imag) > 1e-10 * max(1.0, abs(z.real)):
        raise GaugeError(f"{what} has imaginary part {z.imag:.2e}; the band-edge state is not real")
    return z.real


# -- orders ---------------------------------------------------------------------


def build_U0(edge: BandEdge, homog: HomogenizedEigenpair, order: int = 4) -> MultiscaleExpansion:
    state = MultiscaleExpansion(edge, homog, order)
    state.F[0] = homog.F.copy()
    state.mu[0] = 0.0
    state.built = 0
    return state


def build_U1(state: MultiscaleExpansion) -> MultiscaleExpansion:
    """mu_1 = 0 from <w, 2 d_j w> = 0, and the corrector chi_j = L_*^{-1} d_j w."""
    defect = mu1_solvability_integral(state.edge)
    if defect > 1e-10:
        raise GaugeError(f"<w, d_j w> = {defect:.2e}: the band-edge state is not real, mu_1 = 0 fails")
    state.mu[1] = 0.0
    state.ledger.append({"step": "U1", "operator": "L_*", "defect": defect})
    state.chi = corrector_cells(state.edge)
    state.built = 1
    return state


def build_U2(state: MultiscaleExpansion) -> MultiscaleExpansion:
    """mu_2 = e and P_2 = -L_*^{-1} Lop[F_0]."""
    state.mu[2] = state.e
    state.P[2] = Lstar_inverse_field(state, -L_operator(state, state.F0), "U2").scale(1.0)
    state.built = 2
    return state


def order_rhs_K(state: MultiscaleExpansion, n: int) -> TwoScaleField:
    """K_n: the part of the order-n right-hand side fixed by lower orders."""
    K = state.zero_field()
    if n - 1 in state.P:
        K = K + mixed_gradient(state, state.P[n - 1])
    tail = corrector_term(state, state.envelope(n - 3))
    if n - 2 in state.P:
        tail = tail + state.P[n - 2]
    if tail.rank:
        K = K - envelope_operator(state, tail.compress())
    for j in range(3, n):
        if state.mu.get(j, 0.0) != 0.0:
            K = K + state.U(n - j, closure=n).scale(state.mu[j])
    return K.compress()


def build_order_n(state: MultiscaleExpansion, n: int) -> MultiscaleExpansion:
    """One step of the recursion: mu_n, F_{n-2} and P_n (n >= 3)."""
    if state.built != n - 1:
        raise ValueError(f"order {n} needs orders < {n} (built through {state.built})")
    problem = state.problem
    K = order_rhs_K(state, n)
    state.K[n] = K
    hK = K.cell_pairing(state.w)
    mu_n = -_real_scalar(problem.weight * np.dot(state.F0, hK), f"mu_{n}")
    rhs = hK.real + mu_n * state.F0
    # Fredholm condition for L_AQ - e holds by the choice of mu_n
    lq_defect = abs(problem.inner(state.F0, rhs)) / max(problem.norm(rhs), state.reference_scale)
    state.ledger.append({"step": f"F{n - 2}", "operator": "L_AQ", "defect": float(lq_defect)})
    F_new = apply_LAQ_inverse(state.homog, rhs) if problem.norm(rhs) > 0 else np.zeros(problem.size)
    state.mu[n] = mu_n
    state.F[n - 2] = F_new
    full = K - L_operator(state, F_new) + TwoScaleField.product(state.w, mu_n * state.F0)
    state.P[n] = Lstar_inverse_field(state, full, f"U{n}")
    state.built = n
    log.debug("order %d: mu=%.6e, |F_%d|=%.3e, rank P=%d", n, mu_n, n - 2, problem.norm(F_new), state.P[n].rank)
    return state


def build_order3(state: MultiscaleExpansion) -> MultiscaleExpansion:
    return build_order_n(state, 3)


def build_expansion(edge: BandEdge, homog: HomogenizedEigenpair, order: int = 4) -> MultiscaleExpansion:
    """Run the recursion through ``order``."""
    if homog.multiplicity > 1:
        raise SolvabilityError(f"homogenized eigenvalue {homog.e:.10g} has multiplicity {homog.multiplicity}; the expansion needs a simple one")
    if not homog.discrete:
        raise ValueError("the homogenized eigenpair is not a discrete (sgn(A) e < 0) state")
    state = build_U0(edge, homog, order)
    build_U1(state)
    build_U2(state)
    for n in range(3, order + 1):
        build_order_n(state, n)
    if state.max_defect() > SOLV_LEDGER_TOL:
        raise NumericalError(f"solvability ledger defect {state.max_defect():.2e} exceeds {SOLV_LEDGER_TOL:.0e}")
    return state


# -- checks and assembly ----------------------------------------------------------


def order_residual(state: MultiscaleExpansion, n: int, n_cell: int = 64, y_stride: int = 1) -> float:
    """Relative residual of the order-n equation on a tensor grid of samples.

    Cell operators act through FFTs of real-space samples, envelope operators
    spectrally; this is independent of the coefficient-space recursion.
    Uses the fields as built (closure at ``state.built``).
    """
    edge = state.edge
    d = state.dimension
    problem = state.problem
    axis = np.arange(n_cell) / n_cell
    x = np.stack(np.meshgrid(*([axis] * d), indexing="ij"), axis=-1).reshape(-1, d)
    y_index = np.arange(0, problem.size, y_stride)
    G = edge.wavevectors
    freq = np.fft.fftfreq(n_cell, d=1.0 / n_cell)
    kgrid = np.stack(np.meshgrid(*([freq] * d), indexing="ij"), axis=-1).reshape(-1, d)
    k = np.asarray(edge.k)
    # exp(2 pi i k.x) p(x) with p periodic: derivatives act as 2 pi i (m + k)
    phase = np.exp(2j * np.pi * (x @ k))

    def samples(field_, env_fn=None, cell_fn=None):
        if field_.rank == 0:
            return np.zeros((len(x), len(y_index)))
        env = field_.envelopes if env_fn is None else env_fn(field_.envelopes.T).T
        vals = synthesize(field_.cells, G, x)
        if cell_fn is not None:
            vals = cell_fn(vals)
        return (vals @ env[:, y_index]).real

    def per_fft(vals, mult):
        periodic = vals / phase[:, None]
        shp = (n_cell,) * d
        spec = np.fft.fftn(periodic.reshape(shp + (-1,)), axes=tuple(range(d)))
        spec = spec * mult.reshape(shp + (1,))
        return np.fft.ifftn(spec, axes=tuple(range(d))).reshape(len(x), -1) * phase[:, None]

    V = edge.potential(x)
    kin = 4 * np.pi**2 * np.sum((kgrid + k) ** 2, axis=1)

    def Lstar(vals):
        return per_fft(vals, kin) + (V - edge.energy)[:, None] * vals

    def dx(j):
        return lambda vals: per_fft(vals, 2j * np.pi * (kgrid[:, j] + k[j]))

    def order_field(m):
        return state.U(m) if m >= 0 else state.zero_field()

    lhs = samples(order_field(n), cell_fn=Lstar)
    rhs = np.zeros_like(lhs)
    Um1 = order_field(n - 1)
    for j in range(d):
        rhs += 2 * samples(Um1, env_fn=lambda E, j=j: problem.derivative(E, j), cell_fn=dx(j))
    Um2 = order_field(n - 2)
    q = problem.q_values()[:, None]
    rhs -= samples(Um2, env_fn=lambda E: q * E - sum(problem.derivative(E, j, 2) for j in range(d)))
    for j in range(2, n + 1):
        if state.mu.get(j, 0.0) != 0.0:
            rhs += state.mu[j] * samples(order_field(n - j))
    scale = max(np.linalg.norm(rhs), np.linalg.norm(lhs), np.linalg.norm(samples(order_field(n))), 1e-300)
    return float(np.linalg.norm(lhs - rhs) / scale)


def mu_total(state: MultiscaleExpansion, eps: float, N: int | None = None) -> float:
    """E_* + eps^2 e + sum_{n=3}^N eps^n mu_n."""
    N = state.built if N is None else N
    if eps <= 0:
        raise ValueError("eps must be positive")
    if N > state.built:
        raise ValueError(f"expansion built through order {state.built}, asked for {N}")
    return state.edge.energy + sum(eps**n * state.mu.get(n, 0.0) for n in range(2, N + 1))


def approximation_field(state: MultiscaleExpansion, eps: float, N: int | None = None) -> TwoScaleField:
    """sum_{n<=N} eps^n U_n with the closure F_{N-1} = F_N = 0."""
    N = state.built if N is None else N
    if N > state.built:
        raise ValueError(f"expansion built through order {state.built}, asked for {N}")
    total = state.zero_field()
    for n in range(N + 1):
        total = total + state.U(n, closure=N).scale(eps**n)
    return total.compress()


def assemble_approximation(state: MultiscaleExpansion, eps: float, N: int | None = None, x=None):
    """Samples of u^(N)(x) = sum eps^n U_n(x, eps x) at points x, and mu^(N)."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    N = state.built if N is None else N
    mu = mu_total(state, eps, N)
    if x is None:
        return None, mu
    total = approximation_field(state, eps, N)
    x = np.asarray(x, dtype=float)
    if state.dimension == 1 and x.ndim == 1:
        x = x[:, None]
    cells = synthesize(total.cells, state.edge.wavevectors, x)  # (n_x, r)
    env = interpolate(state.problem, np.stack(total.envelopes), eps * x) if total.rank else np.zeros((len(x), 0))
    return np.real(np.sum(cells * env, axis=1)), mu
