"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration or CLI arguments (exit code 1)."""


class CorpusError(ValueError):
    """Missing or malformed corpus/data files (exit code 2)."""
