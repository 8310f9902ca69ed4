"""
Exception hierarchy for the toolkit.

Routers translate these into HTTP errors, the CLI into exit codes.
"""


class SltmpcError(Exception):
    """Base class for every error raised by the toolkit."""


# --- geometry -------------------------------------------------------------

class GeometryError(SltmpcError):
    pass


class Unbounded(GeometryError):
    pass


class Infeasible(GeometryError):
    pass


class EmptyResult(GeometryError):
    pass


class DimensionTooHigh(GeometryError):
    pass


class ShapeMismatch(GeometryError):
    pass


class SharedShapeViolation(GeometryError):
    pass


# --- models and offline synthesis ----------------------------------------

class DisturbanceOutsideW(SltmpcError):
    pass


class NotStabilizable(SltmpcError):
    pass


class NotConverged(SltmpcError):
    pass


class EmptyInvariantSet(SltmpcError):
    pass


class LengthMismatch(SltmpcError):
    pass


# --- online control -------------------------------------------------------

class IncompatibleTerminalSet(SltmpcError):
    pass


class WbarOutsideSet(SltmpcError):
    pass


class DegenerateSigma(SltmpcError):
    pass


class SecondaryInfeasible(SltmpcError):
    pass


class EmptyMemory(SltmpcError):
    pass


class ControllerInfeasible(SltmpcError):
    pass


# --- runner ---------------------------------------------------------------

class ConfigInvalid(SltmpcError):
    pass


class AuditFailed(SltmpcError):
    pass
