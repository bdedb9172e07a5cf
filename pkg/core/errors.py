"""
Exception hierarchy for the super-resolution toolkit
"""


class SRError(Exception):
    """Base class for all toolkit errors"""

    exit_code = 1


class ConfigError(SRError):
    """Invalid, unknown or missing configuration value"""

    exit_code = 2


class ShapeError(SRError, ValueError):
    """Tensor shape or channel contract violated"""

    exit_code = 2


class TapeError(SRError, ValueError):
    """Misuse of a gradient tape"""

    exit_code = 1


class DataError(SRError):
    """Unreadable or unsuitable input data"""

    exit_code = 3


class CheckpointError(SRError):
    """Checkpoint could not be read, written or applied"""

    exit_code = 4


class ChecksumError(CheckpointError):
    """Checkpoint checksum does not match its contents"""


class FormatVersionError(CheckpointError):
    """Checkpoint written with an unknown format version"""


class FingerprintMismatchError(CheckpointError):
    """Checkpoint was produced by a different architecture config"""


class CheckpointMismatchError(CheckpointError):
    """Checkpoint parameter names or shapes do not fit the target network"""

    def __init__(self, message: str, parameter: str = ""):
        super().__init__(message)
        self.parameter = parameter


class TrainingDivergedError(SRError):
    """Training produced non-finite values"""

    exit_code = 5


class NonFiniteError(TrainingDivergedError, ArithmeticError):
    """A tensor operation produced NaN or Inf"""


class GradCheckFailure(SRError):
    """Analytic gradients disagree with the finite-difference oracle"""

    exit_code = 6
