class ConfigError(ValueError):
    """Invalid configuration or shape/spec mismatch (CLI exit code 4)."""


class InputError(ValueError):
    """Unreadable, corrupt or non-finite input data (CLI exit code 2)."""
