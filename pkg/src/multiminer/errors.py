"""Exception hierarchy shared by every stage of the pipeline.

Each class carries the process exit code the CLI uses for it.
"""


class MultiMinerError(Exception):
    exit_code = 1
    kind = "error"


class ConfigError(MultiMinerError, ValueError):
    exit_code = 2
    kind = "config"


class DimensionError(ConfigError):
    kind = "dimension"


class DataError(MultiMinerError):
    exit_code = 3
    kind = "data"


class GenerationError(DataError):
    kind = "generation"


class ChecksumError(DataError):
    kind = "checksum"


class FormatVersionError(DataError):
    kind = "format-version"


class MissingArtifactError(DataError):
    kind = "missing-artifact"


class TrainingError(MultiMinerError):
    exit_code = 4
    kind = "training"


class PretrainingFailure(TrainingError):
    kind = "pretraining-gate"

    def __init__(self, message, metrics=None):
        super().__init__(message)
        self.metrics = dict(metrics or {})


class MergeError(TrainingError):
    kind = "merge"


class InsufficientDataError(MultiMinerError, ValueError):
    exit_code = 3
    kind = "insufficient-data"


class NumericError(MultiMinerError, FloatingPointError):
    exit_code = 5
    kind = "numeric"

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
