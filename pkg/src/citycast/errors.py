"""Exception hierarchy shared by every citycast module."""


class CityCastError(Exception):
    """Base class for all package errors."""


class ShapeError(CityCastError, ValueError):
    pass


class ParameterError(CityCastError, ValueError):
    pass


class EvaluationError(CityCastError):
    """A function under gradient check produced a non-finite value."""


class DataError(CityCastError):
    """Dataset content or availability problems (exit code 2 in the CLI)."""


class MissingFileError(DataError, FileNotFoundError):
    pass


class MetaMismatchError(DataError):
    pass


class AsymmetricAdjacencyError(DataError):
    pass


class MissingValuesError(DataError):
    pass


class InsufficientDataError(DataError):
    pass


class EmptyGraphError(DataError):
    pass


class RankError(DataError):
    """Not enough non-trivial Laplacian eigenvectors for the requested width."""

    def __init__(self, requested: int, available: int):
        self.requested = requested
        self.available = available
        super().__init__(
            f"requested {requested} region-embedding columns but only "
            f"{available} non-trivial eigenvectors are available"
        )


class ConfigError(CityCastError, ValueError):
    pass


class ContextIndexError(CityCastError, IndexError):
    pass


class TrainingError(CityCastError):
    pass


class CheckpointError(CityCastError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointManifestError(CheckpointError):
    pass
