"""
Error taxonomy shared by every stage of the multiscale pipeline.

Each class carries the process exit code the CLI returns for it, plus an
optional stage name and cause so the pipeline can write a machine-readable
record when a run aborts.
"""


class MultiscaleError(Exception):
    """Base class. Subclasses set `exit_code`."""

    exit_code = 1

    def __init__(self, message: str, stage: str | None = None, cause: str | None = None):
        super().__init__(message)
        self.stage = stage
        self.cause = cause

    def record(self) -> dict:
        return {
            "stage": self.stage,
            "cause": self.cause or type(self).__name__,
            "error": str(self),
            "exit_code": self.exit_code,
        }


class DomainError(MultiscaleError, ValueError):
    """Bad argument or violated precondition."""

    exit_code = 2


class UnsupportedSpaceError(DomainError):
    """The coefficient needs ambient coordinates or a chart the space lacks."""


class SandwichRateError(DomainError):
    """A set sequence is not Cauchy at the required rate."""

    def __init__(self, message: str, pair: tuple[int, int], distance: float, bound: float):
        super().__init__(message, cause="rate")
        self.pair = pair
        self.distance = distance
        self.bound = bound


class ConstructionError(MultiscaleError, RuntimeError):
    """A constructed object (nets, cubes, glued metric) failed its invariants."""

    exit_code = 3

    def __init__(self, message: str, stage: str | None = None, cause: str | None = None,
                 offending: list | None = None):
        super().__init__(message, stage=stage, cause=cause)
        self.offending = offending or []


class NumericError(MultiscaleError, RuntimeError):
    """Solver non-convergence or quadrature failure."""

    exit_code = 3

    def __init__(self, message: str, stage: str | None = None, cause: str | None = None,
                 residuals: dict | None = None):
        super().__init__(message, stage=stage, cause=cause)
        self.residuals = residuals or {}


class CoverageError(MultiscaleError, RuntimeError):
    """Missing values, uncovered audit pairs, or no admissible lattice cube."""

    exit_code = 4

    def __init__(self, message: str, stage: str | None = None, cause: str | None = None,
                 holes: list | None = None):
        super().__init__(message, stage=stage, cause=cause)
        self.holes = holes or []


class NotFoundError(CoverageError):
    """No lattice cube satisfies the covering requirement."""
