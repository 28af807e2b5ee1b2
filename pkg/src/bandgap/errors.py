"""Exception hierarchy.

Every failure carries the name of the violated hypothesis or tolerance so
that the command line front end can report it verbatim and map it onto an
exit code.
"""


class BandgapError(Exception):
    """Base class for all library errors."""

    exit_code = 1


class ConfigError(BandgapError):
    exit_code = 2


class HypothesisError(BandgapError):
    """A hypothesis of the bifurcation theory failed a runtime check.

    ``hypothesis`` is one of ``"H2(a)"``, ``"H2(b)"``, ``"H2(c)"``, ``"H3"``.
    """

    exit_code = 3

    def __init__(self, hypothesis: str, message: str):
        self.hypothesis = hypothesis
        super().__init__(f"{hypothesis} violated: {message}")


class GaplessEdgeError(BandgapError):
    exit_code = 4


class NumericalError(BandgapError):
    """Solver non-convergence or a residual self-check above tolerance."""

    exit_code = 5


class SolvabilityError(NumericalError):
    """Right-hand side not orthogonal to the kernel of a Fredholm operator."""


class BandCrossingError(NumericalError):
    pass


class GaugeError(NumericalError):
    pass


class MemoryBudgetError(BandgapError):
    exit_code = 6
