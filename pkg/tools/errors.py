"""Exception hierarchy shared by the MTLB tools.

Validation failures map to exit code 1 on the command line, numerical
failures (and report I/O) to exit code 2.
"""
from typing import Optional, Sequence

import numpy as np


class MtlbError(Exception):
    """Base class for every error raised by the toolkit."""

    exit_code = 2


class MtlbValidationError(MtlbError, ValueError):
    """Inputs violate a documented precondition."""

    exit_code = 1


class MtlbNumericError(MtlbError, ArithmeticError):
    """A numerical procedure failed or produced an unusable result."""

    exit_code = 2


class ReportIoError(MtlbError, OSError):
    """Writing a report or CSV file failed."""

    exit_code = 2


# Validation family

class AsymmetricMatrixError(MtlbValidationError):
    pass


class NotPositiveDefiniteError(MtlbValidationError):
    pass


class SingularCError(MtlbValidationError):
    pass


class InvalidParameterError(MtlbValidationError):
    pass


class ConfigParseError(MtlbValidationError):
    """Malformed JSON input; carries the 1-based line and column."""

    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"{message} (line {line}, column {column})")
        self.line = line
        self.column = column


class ConfigValidationError(MtlbValidationError):
    pass


class NotReducibleError(MtlbValidationError):
    pass


class NonGrowingInputError(MtlbValidationError):
    pass


class NotARootError(MtlbValidationError):
    pass


class NonGrowingModeError(MtlbValidationError):
    pass


# Numeric family

class ComplexVelocitiesError(MtlbNumericError):
    pass


class AtAsymptoteError(MtlbNumericError):
    pass


class RootResidualTooLargeError(MtlbNumericError):
    pass


class NearCharacteristicVelocityError(MtlbNumericError):
    pass


class RankDeficiencyAmbiguousError(MtlbNumericError):
    """The null space at a root has dimension > 1; all basis vectors attached."""

    def __init__(self, message: str, basis: Sequence[np.ndarray]):
        super().__init__(message)
        self.basis = list(basis)


class SingularEtaError(MtlbNumericError):
    pass


class HamiltonianStructureError(MtlbNumericError):
    pass


class StepUnstableError(MtlbNumericError):
    pass


class BlowupError(MtlbNumericError):
    def __init__(self, message: str, step: Optional[int] = None):
        super().__init__(message)
        self.step = step


class NotConvergedError(MtlbNumericError):
    pass


class MatchingAmbiguousError(MtlbNumericError):
    pass
