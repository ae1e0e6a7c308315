"""
Error hierarchy for the video grounding toolkit
Every failure raised by a tool derives from GroundingError so the CLI can map it to an exit code
"""

from typing import Optional


class GroundingError(Exception):
    """Base class for all toolkit errors"""


class DimensionError(GroundingError, ValueError):
    """Operand shapes do not line up"""


class NumericError(GroundingError, ArithmeticError):
    """A non-finite value showed up where a finite one is required"""

    def __init__(self, message: str, step: Optional[int] = None):
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step


class OracleError(GroundingError):
    """A verification oracle could not produce a trustworthy answer"""


class UnsupportedModeError(GroundingError, ValueError):
    """Operation is not defined for the requested SSM mode or parameterization"""


class CapacityError(GroundingError, ValueError):
    """Input exceeds a fixed-size table such as the positional embeddings"""


class FormatError(GroundingError):
    """Binary file is malformed"""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


class LoadError(GroundingError):
    """File parsed but its contents do not match what the caller expects"""


class AnnotationError(GroundingError):
    """An annotation line is missing a key or carries an invalid value"""

    def __init__(self, message: str, line: int, key: Optional[str] = None):
        where = f"line {line}" if key is None else f"line {line}, key '{key}'"
        super().__init__(f"{message} ({where})")
        self.line = line
        self.key = key


class ValidationError(GroundingError, ValueError):
    """A record or configuration violates one of its invariants"""


class FreezeViolationError(GroundingError):
    """Frozen weights changed during training"""
