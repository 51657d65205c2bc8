"""Exception types raised across the workbench."""


class CrystalSurfaceError(Exception):
    """Base class for all workbench errors."""


class ConfigurationError(CrystalSurfaceError, ValueError):
    """Invalid parameters, presets or recorder windows."""


class ContractViolation(CrystalSurfaceError, ValueError):
    """An operation was called outside its precondition."""


class ShapeMismatchError(ContractViolation):
    """Replicates or series disagree on grid shape or metadata."""


class RateSaturationError(CrystalSurfaceError, OverflowError):
    """|K*w| exceeded the exp() range; the replicate is aborted."""

    def __init__(self, K, w):
        self.K = K
        self.w = w
        super().__init__(f"rate saturation: |K*w| = {abs(K * w):.1f} exceeds limit (K={K}, w={w})")


class ModelError(CrystalSurfaceError, RuntimeError):
    """Fatal model state, e.g. total rate underflow to zero."""


class SingularFitError(CrystalSurfaceError, ValueError):
    """Least-squares normal matrix is singular."""


class CoverageGapError(CrystalSurfaceError, ValueError):
    """Point cloud leaves a gap wider than allowed in the fit interval."""


class SigmaInvariantError(CrystalSurfaceError, ValueError):
    """A fitted sigma curve breaks one of its invariants."""

    def __init__(self, failures):
        self.failures = list(failures)
        super().__init__("sigma invariants violated: " + ", ".join(self.failures))


class SelectionInconclusive(CrystalSurfaceError, RuntimeError):
    """No (epsilon, delta) grid point satisfies both tolerances."""

    def __init__(self, message, sweep=None):
        self.sweep = sweep
        super().__init__(message)


class SolverFailure(CrystalSurfaceError, RuntimeError):
    """Stiff integrator failed (step-size collapse)."""


class ConvergenceFailure(CrystalSurfaceError, RuntimeError):
    """Inner proximal iteration did not converge."""


class ReplicateFailure(CrystalSurfaceError, RuntimeError):
    """A replicate failed; the ensemble is aborted."""


class OutputConflictError(CrystalSurfaceError, RuntimeError):
    """Existing outputs were produced by a different configuration."""


class FigureDataError(CrystalSurfaceError, ValueError):
    """Figure inputs are missing or empty."""

    def __init__(self, figure_id, missing):
        self.figure_id = figure_id
        self.missing = list(missing)
        super().__init__(f"figure '{figure_id}': missing inputs {', '.join(self.missing)}")
