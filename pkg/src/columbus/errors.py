"""Exception types shared across the package."""


class ColumbusError(Exception):
    pass


class ConfigError(ColumbusError, ValueError):
    """Invalid configuration, shape signature or file layout."""


class StateError(ColumbusError, RuntimeError):
    """Operation invoked in the wrong order (e.g. backward with no forward)."""


class UsageError(ColumbusError, ValueError):
    """Valid objects combined in a way the operation does not support."""


class InputError(ColumbusError, ValueError):
    """Malformed data passed to an otherwise well-configured operation."""


class TrainingDivergence(ColumbusError, FloatingPointError):
    """Raised when a training step produces a non-finite loss."""
