"""Exception types raised across the package."""


class HfeError(Exception):
    """Base class for all errors raised by vertebra_hfe."""


class CalibrationError(HfeError, ValueError):
    """Phantom samples cannot define a density calibration line."""


class KindMismatchError(HfeError, ValueError):
    """A volume of the wrong kind (grey/density/mask) was passed."""


class OutOfBoundsError(HfeError, ValueError):
    """A sample point lies outside the domain of a volume."""


class ZeroOverlapError(HfeError, ValueError):
    """One or more elements do not overlap the image volume."""

    def __init__(self, message, element_ids=()):
        super().__init__(message)
        self.element_ids = list(element_ids)


class GeometryError(HfeError, ValueError):
    """Degenerate or inverted element geometry."""

    def __init__(self, message, element_ids=()):
        super().__init__(message)
        self.element_ids = list(element_ids)


class ConstraintError(HfeError):
    """Boundary conditions leave the system singular or are inconsistent."""


class ConvergenceError(HfeError):
    """An iterative solve failed to reach its tolerance."""

    def __init__(self, message, residual=float("nan"), step=None):
        super().__init__(message)
        self.residual = residual
        self.step = step


class NoYieldError(HfeError, ValueError):
    """Yield stress requested for a non-positive apparent density."""


class GridMismatchError(HfeError, ValueError):
    """Two DVC grids do not share origin, spacing and dims."""


class EmptyStrainError(HfeError):
    """No fully correlated cell exists to differentiate."""


class CoverageError(HfeError):
    """Boundary-condition nodes fall outside the usable DVC data."""

    def __init__(self, message, node_ids=()):
        super().__init__(message)
        self.node_ids = list(node_ids)


class EmptyComparisonError(HfeError):
    """No DVC point qualified for the FE comparison."""


class InsufficientDataError(HfeError, ValueError):
    """Too few samples for a regression."""


class DegenerateRegressionError(HfeError, ValueError):
    """The independent variable has zero variance."""


class ContractError(HfeError, ValueError):
    """Inputs violate an interface contract (mismatched meshes, unconstrained nodes...)."""


class PhantomSpecError(HfeError, ValueError):
    """Inconsistent synthetic phantom definition."""


class StageError(HfeError):
    """A pipeline stage failed; wraps the original error with context."""

    def __init__(self, stage, path, cause):
        where = f" ({path})" if path else ""
        super().__init__(f"stage '{stage}' failed{where}: {cause}")
        self.stage = stage
        self.path = path
        self.cause = cause
