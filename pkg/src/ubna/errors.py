"""Exception hierarchy shared by all ubna modules."""


class UBNAError(Exception):
    """Base class for every error raised by this package."""


class InvalidInputError(UBNAError, ValueError):
    """An argument has the wrong shape, range or content."""


class InvariantError(UBNAError, RuntimeError):
    """Internal state violates an invariant (e.g. a negative variance)."""


class ProtocolViolationError(UBNAError):
    """An adaptation protocol constraint was broken."""


class TrainingFailureError(UBNAError, RuntimeError):
    def __init__(self, step, message="loss became non-finite"):
        super().__init__(f"training failed at step {step}: {message}")
        self.step = step


class UndefinedMetricError(UBNAError, ValueError):
    """Every requested class has an empty IoU denominator."""


class CheckpointError(UBNAError):
    """Base class for checkpoint load failures."""


class CorruptHeaderError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class InvalidCheckpointStateError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass
