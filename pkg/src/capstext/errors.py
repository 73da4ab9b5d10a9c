"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration value, preset, flag, or file."""


class FormatError(ValueError):
    """Malformed external file (corpus TSV, vector file, checkpoint)."""


class DivergenceError(RuntimeError):
    """Non-finite loss or gradient encountered during training."""
