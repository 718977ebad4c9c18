"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor dimensions do not chain or do not match a layer."""


class StateError(RuntimeError):
    """An operation was called in the wrong order, e.g. backward before forward."""


class IncompatibleSnapshotError(ValueError):
    """A snapshot or checkpoint does not belong to the model's architecture."""


class PreconditionError(RuntimeError):
    """Inputs violate a documented precondition (e.g. untrained BN statistics)."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""
