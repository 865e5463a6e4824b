"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Array shapes or widths do not match what an operation requires."""


class StateError(RuntimeError):
    """An operation was called in a state that cannot support it."""


class SchemaError(ValueError):
    """A file (CSV, checkpoint header, config) is missing required fields."""
