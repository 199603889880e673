"""Exception types shared across the package."""


class FedseedError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(FedseedError):
    """Tensor shapes are incompatible for the requested operation."""


class DomainError(FedseedError):
    """Input values are outside an operation's mathematical domain."""


class ContractError(FedseedError):
    """A caller violated an interface contract (wrong names, non-scalar loss, ...)."""


class ConfigError(FedseedError):
    """Invalid experiment configuration; message carries the offending key/line."""


class CheckpointError(FedseedError):
    """Checkpoint file is malformed or carries an unknown magic."""


class TeacherTrainingError(FedseedError):
    """Teacher network failed to reach the minimum quality bar within budget."""
