"""Exception classes shared across modules."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration; the message names the fields."""
