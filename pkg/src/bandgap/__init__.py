"""Band edges of periodic Schrodinger operators, effective masses, the
homogenized defect-mode expansion and its direct validation."""

from .bloch import BandEdge, BandStructure, apply_Lstar_inverse, dispersion_derivatives, find_band_edge, solve_bands, spectral_gap
from .effmass import EffectiveMassTensor, effective_mass, effective_mass_hessian, effective_mass_inner_product
from .errors import BandgapError, ConfigError, GaplessEdgeError, HypothesisError, MemoryBudgetError, NumericalError
from .homogenized import HomogenizedEigenpair, HomogenizedProblem, apply_LAQ_inverse, solve_homogenized
from .lattice import CellGrid, LocalizedPotential, PeriodicPotential
from .multiscale import MultiscaleExpansion, build_expansion

__version__ = "0.1.0"
