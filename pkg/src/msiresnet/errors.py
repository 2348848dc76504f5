"""Exception types raised across the library."""


class MsiResNetError(Exception):
    """Base class for every library error."""


class ShapeError(MsiResNetError, ValueError):
    """Operand shapes are incompatible with an operation.

    ``layer_index`` is set when the failure happened inside a model forward
    pass and names the top-level layer that rejected its input.
    """

    def __init__(self, message, layer_index=None):
        super().__init__(message)
        self.layer_index = layer_index


class InvalidSpecError(MsiResNetError, ValueError):
    """A layer, model or config specification is out of its domain."""


class StateError(MsiResNetError, RuntimeError):
    """An object was used in a state that does not allow the call."""


class DegenerateBatchError(MsiResNetError, ValueError):
    pass


class InvalidLabelError(MsiResNetError, ValueError):
    pass


class NonFiniteError(MsiResNetError, ArithmeticError):
    pass


class UndefinedMetricError(MsiResNetError, ZeroDivisionError):
    pass


class InvalidInputError(MsiResNetError, ValueError):
    pass


# checkpoints

class CheckpointError(MsiResNetError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedFileError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


# data pipeline

class DataError(MsiResNetError):
    pass


class ManifestParseError(DataError, ValueError):
    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class DuplicatePathError(DataError, ValueError):
    pass


class MissingFileError(DataError, FileNotFoundError):
    pass


class PPMFormatError(DataError, ValueError):
    pass


class PPMDimensionError(DataError, ValueError):
    pass


class PPMTruncatedError(DataError, ValueError):
    pass
