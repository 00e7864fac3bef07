"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration, shapes or hyperparameters."""


class DataError(ValueError):
    """Malformed or missing input data."""
