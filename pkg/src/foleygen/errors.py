"""Exception hierarchy shared by every stage of the pipeline."""


class FoleyError(Exception):
    """Base class; ``category`` is printed by the CLI on failure."""

    category = "error"


class ParseError(FoleyError):
    category = "parse"


class ValidationError(FoleyError):
    category = "validation"


class DecodeError(FoleyError):
    category = "decode"


class ConfigurationError(FoleyError):
    category = "configuration"


class InputError(FoleyError):
    category = "input"


class NumericalError(FoleyError):
    category = "numerical"


class TrainingError(FoleyError):
    category = "training"


class CheckpointError(FoleyError):
    category = "checkpoint"


class CheckpointVersionError(CheckpointError):
    pass


class FingerprintMismatchError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class StageError(FoleyError):
    category = "stage"

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage!r} failed: {message}")
        self.stage = stage


class UndefinedSimilarityError(InputError):
    pass
