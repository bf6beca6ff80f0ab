"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration value or combination."""


class ValidationError(ValueError):
    """Data violated a contract (range, shape pairing, binarity, coverage)."""


class VocabularyError(ValueError):
    """Token not present in the configured vocabulary."""


class StageError(RuntimeError):
    """Pipeline stage invoked before its dependencies produced their artifacts."""

    def __init__(self, message, missing_stage=None):
        super().__init__(message)
        self.missing_stage = missing_stage


class CheckpointError(RuntimeError):
    """Checkpoint file is corrupt or inconsistent with the current setup."""
