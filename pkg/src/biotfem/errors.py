"""Shared exception types."""


class ConfigurationError(ValueError):
    """Invalid user-facing configuration (parameters, mesh size, boundary spec)."""


class ElementConstructionError(RuntimeError):
    """Local finite element construction failed (degenerate geometry)."""
