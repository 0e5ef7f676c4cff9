"""Exception types shared across the package."""


class ShapeError(ValueError):
    """An array did not have the dimensions a network or environment expects."""


class NonFiniteError(FloatingPointError):
    """A NaN or infinity showed up where only finite values are allowed."""


class ConfigError(ValueError):
    """Invalid hyperparameter or run configuration."""


class CheckpointError(ValueError):
    """A parameter document could not be parsed or does not match its spec."""


class EpisodeDoneError(RuntimeError):
    """``step`` was called on an environment whose episode has ended."""
