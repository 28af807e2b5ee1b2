"""Potentials, cell grids and plane-wave helpers on the unit cell [0, 1)^d."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.special import gamma

HERMITIAN_TOL = 1e-12
DECAY_THRESHOLD = 1e-12

LOCALIZED_FAMILIES = ("gaussian", "sech2", "box", "gaussian_sum", "bump")


def _as_points(x, dimension: int) -> np.ndarray:
    """Reshape positions to (..., d)."""
    x = np.asarray(x, dtype=float)
    if dimension == 1 and (x.ndim == 0 or x.shape[-1] != 1):
        x = x[..., None]
    if x.shape[-1] != dimension:
        raise ValueError(f"expected points with last axis {dimension}, got shape {x.shape}")
    return x


@dataclass(frozen=True)
class PeriodicPotential:
    """Real periodic potential stored as a truncated Fourier series.

    ``V(x) = sum_z coeffs[z] * exp(2 pi i z.x)`` over integer vectors ``z``.
    """

    dimension: int
    coeffs: Mapping[tuple, complex]
    cutoff: int = field(init=False)

    def __post_init__(self):
        if self.dimension not in (1, 2, 3):
            raise ValueError(f"dimension must be 1, 2 or 3, got {self.dimension}")
        clean = {}
        for z, c in self.coeffs.items():
            z = tuple(int(v) for v in np.atleast_1d(z))
            if len(z) != self.dimension:
                raise ValueError(f"wavevector {z} does not match dimension {self.dimension}")
            c = complex(c)
            if c != 0:
                clean[z] = clean.get(z, 0) + c
        for z, c in clean.items():
            partner = clean.get(tuple(-v for v in z), 0.0)
            if abs(partner - c.conjugate()) > HERMITIAN_TOL * max(1.0, abs(c)):
                raise ValueError(f"coefficients at {z} and its negative are not conjugate: V must be real")
        object.__setattr__(self, "coeffs", dict(sorted(clean.items())))
        cutoff = max((max(abs(v) for v in z) for z in clean), default=0)
        object.__setattr__(self, "cutoff", cutoff)

    @classmethod
    def zero(cls, dimension: int = 1) -> "PeriodicPotential":
        return cls(dimension, {})

    @classmethod
    def cosine(cls, amplitudes, dimension: int | None = None, offset: float = 0.0) -> "PeriodicPotential":
        """Separable ``offset + sum_j a_j cos(2 pi x_j)``.

        A scalar amplitude is broadcast over ``dimension`` axes.
        """
        amps = np.atleast_1d(np.asarray(amplitudes, dtype=float))
        if dimension is None:
            dimension = amps.size
        if amps.size == 1:
            amps = np.full(dimension, amps[0])
        if amps.size != dimension:
            raise ValueError("one amplitude per dimension required")
        coeffs = {}
        if offset:
            coeffs[(0,) * dimension] = offset
        for j, a in enumerate(amps):
            if a == 0:
                continue
            for s in (1, -1):
                z = [0] * dimension
                z[j] = s
                coeffs[tuple(z)] = a / 2
        return cls(dimension, coeffs)

    @classmethod
    def from_triples(cls, dimension: int, triples: Iterable[Sequence]) -> "PeriodicPotential":
        """Build from ``(z, re, im)`` triples as they appear in config files."""
        coeffs = {}
        for z, re, im in triples:
            z = tuple(int(v) for v in np.atleast_1d(z))
            coeffs[z] = coeffs.get(z, 0) + complex(re, im)
        return cls(dimension, coeffs)

    def coefficient(self, z) -> complex:
        return self.coeffs.get(tuple(int(v) for v in np.atleast_1d(z)), 0.0)

    def __call__(self, x) -> np.ndarray:
        return eval_periodic(self, x)

    def to_triples(self) -> list:
        return [[list(z), c.real, c.imag] for z, c in self.coeffs.items()]

    @property
    def is_zero(self) -> bool:
        return not self.coeffs


def eval_periodic(V: PeriodicPotential, x) -> np.ndarray:
    """Evaluate ``Re sum_z V_z exp(2 pi i z.x)`` at points ``x`` of shape (..., d)."""
    pts = _as_points(x, V.dimension)
    out = np.zeros(pts.shape[:-1])
    for z, c in V.coeffs.items():
        phase = 2 * np.pi * (pts @ np.asarray(z, dtype=float))
        out += c.real * np.cos(phase) - c.imag * np.sin(phase)
    return out


def periodic_average(V: PeriodicPotential) -> float:
    """Cell average of V, i.e. the real part of its zero Fourier mode."""
    return V.coefficient((0,) * V.dimension).real


@dataclass(frozen=True)
class LocalizedPotential:
    """Analytic localized profile Q(y).

    Families (r is the distance to ``center``):

    * ``gaussian``: depth * exp(-r^2 / (2 width^2))
    * ``sech2``: depth * sech(r / width)^2
    * ``box``: depth on the cube max_j |y_j - c_j| <= width
    * ``bump``: depth * (1 - (r/width)^2)^(smoothness+1) for r < width, a C^smoothness profile
    * ``gaussian_sum``: sum of gaussians given as ``components`` of (depth, width, center)

    A negative depth is a down-defect (well), a positive depth an up-defect.
    """

    dimension: int
    family: str
    depth: float = 0.0
    width: float = 1.0
    center: tuple = ()
    components: tuple = ()
    smoothness: int = 2

    def __post_init__(self):
        if self.family not in LOCALIZED_FAMILIES:
            raise ValueError(f"unknown localized family {self.family!r}; expected one of {LOCALIZED_FAMILIES}")
        center = tuple(float(c) for c in np.atleast_1d(self.center)) if len(np.atleast_1d(self.center)) else (0.0,) * self.dimension
        if len(center) != self.dimension:
            raise ValueError("center must have one entry per dimension")
        object.__setattr__(self, "center", center)
        if self.width <= 0:
            raise ValueError("width must be positive")
        if self.family == "gaussian_sum":
            comps = []
            for depth, width, c in self.components:
                c = tuple(float(v) for v in np.atleast_1d(c))
                if len(c) != self.dimension or width <= 0:
                    raise ValueError(f"bad gaussian component {(depth, width, c)}")
                comps.append((float(depth), float(width), c))
            if not comps:
                raise ValueError("gaussian_sum needs at least one component")
            object.__setattr__(self, "components", tuple(comps))
        if self.smoothness < 0:
            raise ValueError("smoothness must be non-negative")

    @classmethod
    def zero(cls, dimension: int = 1) -> "LocalizedPotential":
        return cls(dimension, "gaussian", depth=0.0)

    @property
    def is_zero(self) -> bool:
        if self.family == "gaussian_sum":
            return all(d == 0 for d, _, _ in self.components)
        return self.depth == 0

    def __call__(self, y) -> np.ndarray:
        pts = _as_points(y, self.dimension)
        if self.family == "gaussian_sum":
            out = np.zeros(pts.shape[:-1])
            for depth, width, c in self.components:
                r2 = np.sum((pts - np.asarray(c)) ** 2, axis=-1)
                out += depth * np.exp(-r2 / (2 * width**2))
            return out
        rel = pts - np.asarray(self.center)
        r = np.sqrt(np.sum(rel**2, axis=-1))
        if self.family == "gaussian":
            return self.depth * np.exp(-(r**2) / (2 * self.width**2))
        if self.family == "sech2":
            return self.depth / np.cosh(np.minimum(r / self.width, 350.0)) ** 2
        if self.family == "box":
            inside = np.max(np.abs(rel), axis=-1) <= self.width
            return np.where(inside, self.depth, 0.0)
        t = np.clip(1.0 - (r / self.width) ** 2, 0.0, None)
        return self.depth * t ** (self.smoothness + 1)

    @property
    def peak(self) -> float:
        if self.family == "gaussian_sum":
            return max(abs(d) for d, _, _ in self.components)
        return abs(self.depth)

    def profile_radius(self) -> float:
        """Distance from the profile center beyond which |Q| < 1e-12 * peak."""
        if self.family == "gaussian":
            return self.width * math.sqrt(2 * math.log(1 / DECAY_THRESHOLD))
        if self.family == "sech2":
            # sech^2 t < 4 exp(-2t)
            return self.width * 0.5 * math.log(4 / DECAY_THRESHOLD)
        if self.family == "box":
            return self.width * math.sqrt(self.dimension)
        if self.family == "bump":
            return self.width
        return max(w * math.sqrt(2 * math.log(1 / DECAY_THRESHOLD)) for _, w, _ in self.components)

    @property
    def decay_radius(self) -> float:
        """Radius about the origin outside of which |Q| < 1e-12 * peak."""
        if self.family == "gaussian_sum":
            return max(
                float(np.linalg.norm(c)) + w * math.sqrt(2 * math.log(1 / DECAY_THRESHOLD))
                for _, w, c in self.components
            )
        return float(np.linalg.norm(self.center)) + self.profile_radius()

    @property
    def decay_length(self) -> float:
        """Characteristic length of the profile, used for box sizing."""
        if self.family == "gaussian_sum":
            return max(float(np.linalg.norm(c)) + w for _, w, c in self.components)
        return float(np.linalg.norm(self.center)) + self.width

    @property
    def min_width(self) -> float:
        if self.family == "gaussian_sum":
            return min(w for _, w, _ in self.components)
        return self.width

    def integral(self) -> float:
        """Exact integral over R^d where a closed form exists, else None."""
        d = self.dimension
        if self.family == "gaussian":
            return self.depth * (2 * np.pi * self.width**2) ** (d / 2)
        if self.family == "gaussian_sum":
            return sum(dep * (2 * np.pi * w**2) ** (d / 2) for dep, w, _ in self.components)
        if self.family == "box":
            return self.depth * (2 * self.width) ** d
        if self.family == "bump" and d == 1:
            n = self.smoothness + 1
            return self.depth * self.width * math.sqrt(math.pi) * gamma(n + 1) / gamma(n + 1.5)
        if self.family == "sech2" and d == 1:
            return 2 * self.depth * self.width
        return None

    def to_dict(self) -> dict:
        out = {"family": self.family, "dimension": self.dimension}
        if self.family == "gaussian_sum":
            out["components"] = [[d, w, list(c)] for d, w, c in self.components]
        else:
            out.update(depth=self.depth, width=self.width, center=list(self.center))
        if self.family == "bump":
            out["smoothness"] = self.smoothness
        return out


@dataclass(frozen=True)
class CellGrid:
    """Uniform nodes j/n_cell, j = 0..n_cell-1, in each direction of the unit cell."""

    dimension: int
    n_cell: int

    def __post_init__(self):
        if self.n_cell < 1:
            raise ValueError("n_cell must be positive")

    @property
    def shape(self) -> tuple:
        return (self.n_cell,) * self.dimension

    @property
    def axis(self) -> np.ndarray:
        return np.arange(self.n_cell) / self.n_cell

    def points(self) -> np.ndarray:
        """Nodes as an array of shape (n_cell, ..., n_cell, d)."""
        mesh = np.meshgrid(*([self.axis] * self.dimension), indexing="ij")
        return np.stack(mesh, axis=-1)

    def sample(self, fn) -> np.ndarray:
        return np.asarray(fn(self.points()))


def cell_inner_product(f, g, grid: CellGrid) -> complex:
    """Trapezoidal approximation of the integral of conj(f) g over the unit cell."""
    f = np.asarray(f)
    g = np.asarray(g)
    if f.shape != grid.shape or g.shape != grid.shape:
        raise ValueError(f"samples of shape {f.shape} and {g.shape} do not match grid shape {grid.shape}")
    return complex(np.mean(np.conj(f) * g))


def plane_wave_basis(dimension: int, cutoff: int, k=None) -> np.ndarray:
    """Integer wavevectors m of a plane-wave basis, shape (n_pw, d), lexicographic.

    Without ``k`` this is the cube |m_j| <= cutoff.  For a Brillouin-zone corner
    ``k`` (components 0 or +-1/2) the range is shifted so that the set {m + k}
    is symmetric under negation, which lets real band-edge states be represented
    exactly.
    """
    if cutoff < 0:
        raise ValueError("plane-wave cutoff must be non-negative")
    ranges = []
    kk = np.zeros(dimension) if k is None else np.asarray(k, dtype=float).reshape(dimension)
    for kj in kk:
        if abs(kj - 0.5) < 1e-14:
            ranges.append(range(-cutoff - 1, cutoff + 1))
        elif abs(kj + 0.5) < 1e-14:
            ranges.append(range(-cutoff, cutoff + 2))
        else:
            ranges.append(range(-cutoff, cutoff + 1))
    return np.array(list(itertools.product(*ranges)), dtype=int).reshape(-1, dimension)


def fourier_coupling_matrix(V: PeriodicPotential, basis: np.ndarray) -> np.ndarray:
    """Matrix of V in a plane-wave basis: entry (i, j) is V_{m_i - m_j}."""
    n = len(basis)
    out = np.zeros((n, n), dtype=complex)
    if V.is_zero:
        return out
    index = {tuple(m): i for i, m in enumerate(basis)}
    for z, c in V.coeffs.items():
        for j, m in enumerate(basis):
            i = index.get(tuple(m + np.asarray(z)))
            if i is not None:
                out[i, j] = c
    return out


def synthesize(coeffs, wavevectors, x) -> np.ndarray:
    """Evaluate sum_G c_G exp(2 pi i G.x); ``coeffs`` may carry trailing columns."""
    wavevectors = np.asarray(wavevectors, dtype=float)
    d = wavevectors.shape[1]
    pts = _as_points(x, d)
    phase = np.exp(2j * np.pi * (pts @ wavevectors.T))
    return phase @ np.asarray(coeffs)
