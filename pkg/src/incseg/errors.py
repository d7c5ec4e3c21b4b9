"""Exception types shared across the package."""


class IncsegError(Exception):
    """Base class for all package errors."""


class ConfigError(IncsegError, ValueError):
    """Invalid configuration value or malformed config file."""


class ContractError(IncsegError, ValueError):
    """An operation was called with arguments that violate its contract."""


class GenerationError(IncsegError, RuntimeError):
    """Scene synthesis could not satisfy placement constraints."""


class CheckpointError(IncsegError, RuntimeError):
    """Checkpoint or store file is missing, corrupt, or incompatible."""


class TrainingDivergedError(IncsegError, RuntimeError):
    """Training produced a non-finite loss."""
