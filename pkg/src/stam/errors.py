"""Exception hierarchy shared by every subpackage."""


class StamError(Exception):
    """Base class for all library errors."""


class DimensionError(StamError, ValueError):
    """Operand shapes are incompatible."""


class ParameterError(StamError, ValueError):
    """A scalar argument is out of its legal range."""


class ContractError(StamError, ValueError):
    """A precondition of an operation was violated."""


class ConfigurationError(StamError, ValueError):
    """A model, dataset or run configuration is invalid."""


class CheckpointError(StamError):
    """Base class for checkpoint loading failures."""


class BadMagicError(CheckpointError):
    pass


class TruncatedFileError(CheckpointError):
    pass


class ManifestMismatchError(CheckpointError):
    pass


class DatasetFormatError(StamError):
    """A dataset file on disk is malformed."""
