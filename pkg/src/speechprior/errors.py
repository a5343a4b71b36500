"""Exception hierarchy shared across the package.

The CLI maps each class to a distinct exit code.
"""


class SpeechPriorError(Exception):
    exit_code = 1


class ConfigError(SpeechPriorError, ValueError):
    exit_code = 2


class DataError(SpeechPriorError, ValueError):
    exit_code = 3


class NumericError(SpeechPriorError, ArithmeticError):
    exit_code = 4


class AssetError(SpeechPriorError, FileNotFoundError):
    exit_code = 5


class CheckpointError(SpeechPriorError):
    """Checkpoint missing, truncated, or built for a different architecture."""

    exit_code = 6
