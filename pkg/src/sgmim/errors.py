class GeometryError(ValueError):
    """Array shapes do not match the patch grid or layer widths."""


class ConfigurationError(ValueError):
    """A configuration value makes the requested operation ill-defined."""


class IntegrityError(IOError):
    """A persisted file is truncated, corrupted or inconsistent with its manifest."""


class DomainError(ValueError):
    """An input lies outside the mathematical domain of a metric."""
