"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration value or inconsistent setup."""


class FormatError(ValueError):
    """Malformed or truncated binary file."""


class NumericalError(RuntimeError):
    """Training diverged (NaN/Inf loss) or another numerical failure."""
