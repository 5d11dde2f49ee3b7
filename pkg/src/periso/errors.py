"""Exception types raised by the embedding pipeline."""


class PerisoError(Exception):
    """Base class for all library errors."""


class ConfigError(PerisoError):
    """A run configuration is malformed; the message names the offending key path."""


class DimensionError(PerisoError):
    """Requested ambient dimension is below the minimum the perturbation system needs."""


class NotShortError(PerisoError):
    """The metric defect g - du.du is not positive-definite with the required margin."""

    def __init__(self, message, grid_index=None, min_eigenvalue=None):
        super().__init__(message)
        self.grid_index = grid_index
        self.min_eigenvalue = min_eigenvalue


class CoverageError(PerisoError):
    """A grid point is not strictly inside any chart of a would-be cover."""

    def __init__(self, message, grid_index=None):
        super().__init__(message)
        self.grid_index = grid_index


class PositivityError(PerisoError):
    """A decomposition coefficient dips below the positivity floor on its chart."""

    def __init__(self, message, grid_index=None, min_coefficient=None):
        super().__init__(message)
        self.grid_index = grid_index
        self.min_coefficient = min_coefficient


class GenericityError(PerisoError):
    """Random projection directions kept collapsing derivative ranks."""


class RankError(PerisoError):
    """The pointwise first/second derivative rows lost full rank (freeness failure)."""


class NonContractionError(PerisoError):
    """The perturbation iteration made no progress on its increment."""


class BudgetError(PerisoError):
    """A perturbation exceeded the displacement budget allowed at its stage."""


class StagingExhaustedError(PerisoError):
    """Increment staging hit its cap without reaching the target tolerance."""


class ShellCapError(PerisoError):
    """A neighbor shell enumeration would exceed the configured transform cap."""


class GateError(PerisoError):
    """A verification gate failed; the report names the failing property."""
