"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Array shapes do not line up (names the offending layer or profile)."""


class NumericError(RuntimeError):
    """A loss or gradient went non-finite; the current task is aborted."""


class FormatError(ValueError):
    """A dataset file violates its declared format (carries offset / row info)."""


class ConfigError(ValueError):
    """Experiment config rejected; message carries the key path and line."""


class StateError(RuntimeError):
    """Operation requires state that was never initialised (e.g. uncalibrated detector)."""


class IntegrityError(RuntimeError):
    """Checkpoint payload does not match its recorded content hash."""
