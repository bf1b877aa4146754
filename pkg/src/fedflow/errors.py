class ConfigError(ValueError):
    """Invalid configuration or distribution parameters."""


class ShapeError(ValueError):
    """Array shapes do not match the network or batch contract."""


class NumericError(FloatingPointError):
    """A loss, gradient or ODE state became non-finite."""


class CheckpointError(ValueError):
    """Checkpoint file is malformed or does not match the expected architecture."""
