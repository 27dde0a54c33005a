"""
Exception hierarchy for the MARS detailization toolkit.

Library code raises these; only ``main.py`` turns them into log lines and
exit codes. Every class also derives from the builtin exception the entry
point already catches, so ``except ValueError`` keeps working.
"""

from __future__ import annotations


class MarsError(Exception):
    """Base class for all errors raised by this package."""


class ContractError(MarsError, ValueError):
    """A documented precondition of an operation was violated."""


class DimensionError(ContractError):
    """Tensor extents are incompatible for the requested operation."""


class NumericalError(MarsError, ArithmeticError):
    """An operation produced NaN or infinite values."""


class GeometryError(MarsError, ValueError):
    """A mesh or point set is unusable (degenerate, non-watertight, ...)."""


class ObjParseError(GeometryError):
    """Malformed record in an OBJ file.

    Attributes:
        line_number: 1-based line of the offending record.
    """

    def __init__(self, message: str, line_number: int) -> None:
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class MeshIndexError(GeometryError, IndexError):
    """A face references a vertex that does not exist."""


class SpecError(MarsError, ValueError):
    """A procedural shape recipe is invalid or would self-intersect."""


class FormatError(MarsError, ValueError):
    """A binary file (checkpoint, voxel grid) is corrupt or of the wrong kind."""


class ConfigError(MarsError, ValueError):
    """Configuration is unknown, inconsistent or mismatched between artifacts."""


class TrainingError(MarsError, RuntimeError):
    """Training diverged.

    Attributes:
        step: Optimizer step at which the failure was detected.
    """

    def __init__(self, message: str, step: int) -> None:
        super().__init__(f"step {step}: {message}")
        self.step = step


class EmptyIsosurfaceWarning(UserWarning):
    """Decoding produced no surface at the requested iso level."""
