"""Exception hierarchy shared by every stage of the pipeline."""


class EyeflowError(Exception):
    """Base class for all errors raised by eyeflow."""


class MeshError(EyeflowError):
    """Malformed, non-conforming or degenerate mesh input."""


class GeometryError(MeshError):
    """The parametric geometry cannot be built (degenerate geometry)."""


class SpaceError(EyeflowError):
    """Invalid function-space request."""


class AssemblyError(EyeflowError):
    """Inconsistent coefficients, spaces or boundary data during assembly."""


class SolverError(EyeflowError):
    """Linear or nonlinear solver failure."""


class ZeroPivotError(SolverError):
    def __init__(self, row):
        super().__init__(f"zero pivot in row {row}")
        self.row = row


class ConfigError(EyeflowError):
    """Configuration parse error or invariant violation."""


class StageError(EyeflowError):
    """Wraps an error raised while running one pipeline stage."""

    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause
