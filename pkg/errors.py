"""
Exception hierarchy for the insertion pipeline.

Every error raised on purpose by the pipeline derives from InsertionError, and
also from the closest builtin so plain ``except ValueError`` callers keep working.
"""

from typing import Any, Dict, Optional


class InsertionError(Exception):
    """Root of all pipeline errors."""


class ConfigError(InsertionError, ValueError):
    """Configuration failed validation."""


# --- scene_io ---------------------------------------------------------------

class MissingAsset(InsertionError, FileNotFoundError):
    def __init__(self, path: Any, what: str = "asset"):
        self.path = str(path)
        super().__init__(f"Missing {what}: {self.path}")


class DimensionMismatch(InsertionError, ValueError):
    pass


class InvalidPose(InsertionError, ValueError):
    pass


class InvalidRate(InsertionError, ValueError):
    pass


class ParseError(InsertionError, ValueError):
    pass


class DegenerateMesh(InsertionError, ValueError):
    pass


class IoError(InsertionError, OSError):
    pass


# --- geometry / placement ----------------------------------------------------

class BehindCamera(InsertionError, ValueError):
    """The point projects behind the camera; signals invisibility, not a fault."""

    def __init__(self, depth: float):
        self.depth = float(depth)
        super().__init__(f"Point is behind the camera (depth={self.depth:.6g})")


class DegenerateInput(InsertionError, ValueError):
    pass


class NoPlaceableRegion(InsertionError, ValueError):
    pass


class PlaneFitFailed(InsertionError, RuntimeError):
    pass


# --- stabilization -------------------------------------------------------------

class InsufficientAnchors(InsertionError, ValueError):
    pass


class NonConvergence(InsertionError, RuntimeError):
    """Iteration cap hit with the residual still above threshold.

    ``best`` holds the best pose iterate, ``diagnostics`` the solver report.
    """

    def __init__(self, message: str, best: Any = None, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.best = best
        self.diagnostics = diagnostics or {}


# --- lighting ------------------------------------------------------------------

class OutOfRangeInput(InsertionError, ValueError):
    pass


# --- style_transfer ----------------------------------------------------------------

class EmptyBatch(InsertionError, ValueError):
    pass


class ShapeMismatch(InsertionError, ValueError):
    pass


class NonFiniteGradient(InsertionError, ArithmeticError):
    pass


class PluginNotFound(InsertionError, FileNotFoundError):
    pass


class PluginTimeout(InsertionError, TimeoutError):
    pass


class BadPluginOutput(InsertionError, RuntimeError):
    pass


# --- retrieval / metrics -------------------------------------------------------------

class InsufficientData(InsertionError, ValueError):
    pass


class EmptyInput(InsertionError, ValueError):
    pass


class NumericalFailure(InsertionError, ArithmeticError):
    pass


# --- orchestration ---------------------------------------------------------------------

class StageError(InsertionError, RuntimeError):
    """Wraps a failure inside the pipeline with the stage name and frame index."""

    def __init__(self, stage: str, cause: BaseException, frame: Optional[int] = None):
        self.stage = stage
        self.frame = frame
        self.cause = cause
        where = f"stage '{stage}'" if frame is None else f"stage '{stage}' (frame {frame})"
        super().__init__(f"{where} failed: {type(cause).__name__}: {cause}")
