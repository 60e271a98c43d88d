"""Exception hierarchy shared by every stage of the pipeline."""


class HoneymarkError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class RejectedInput(HoneymarkError, ValueError):
    """An argument violates a documented precondition."""

    exit_code = 2


class ConfigError(RejectedInput):
    """An experiment config is malformed or names a missing resource."""

    exit_code = 2

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class FormatError(HoneymarkError, ValueError):
    """An input file does not follow its declared on-disk format."""

    exit_code = 2

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class CorruptCheckpoint(HoneymarkError):
    exit_code = 2


class UnsupportedVersion(CorruptCheckpoint):
    pass


class TrainingDiverged(HoneymarkError, ArithmeticError):
    """Raised when the training loss becomes non-finite."""

    exit_code = 4

    def __init__(self, epoch, iteration=None):
        where = f"epoch {epoch}"
        if iteration is not None:
            where = f"honey iteration {iteration}, {where}"
        super().__init__(f"training diverged at {where}")
        self.epoch = epoch
        self.iteration = iteration


class DegenerateGradient(HoneymarkError, ArithmeticError):
    exit_code = 4


class ProtocolError(HoneymarkError):
    """A suspicious model returned a response that is not a probability vector."""

    exit_code = 5


class DependencyError(HoneymarkError):
    """A pipeline stage is missing an artifact produced by an upstream stage."""

    exit_code = 3

    def __init__(self, path, stage=None):
        hint = f" (run `{stage}` first)" if stage else ""
        super().__init__(f"missing upstream artifact: {path}{hint}")
        self.path = path
        self.stage = stage
