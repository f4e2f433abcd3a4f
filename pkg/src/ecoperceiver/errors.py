"""Exception types shared across modules."""


class ConfigError(ValueError):
    """A configuration value is out of range or inconsistent."""


class InputError(ValueError):
    """Input files are missing or malformed."""
