"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration or input data."""


class NumericalError(RuntimeError):
    """Numerical failure: non-finite states, failed factorizations."""
