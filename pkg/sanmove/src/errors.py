class SanMoveError(Exception):
    """Base class for errors raised by the sanmove package."""


class ConfigError(SanMoveError, ValueError):
    pass


class DataError(SanMoveError, ValueError):
    pass


class ShapeError(SanMoveError, ValueError):
    pass


class CheckpointError(SanMoveError):
    pass


class BadMagicError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class UnknownTensorError(CheckpointError):
    pass
