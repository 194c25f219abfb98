"""Shared error types for model and run configuration."""


class ConfigError(ValueError):
    """A configuration value is out of range or inconsistent."""
