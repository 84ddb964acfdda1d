"""Exception hierarchy. CLI exit codes are attached to the three top-level kinds."""

from sklearn.exceptions import NotFittedError as _SklearnNotFitted


class PemmaError(Exception):
    exit_code = 1


class ConfigError(PemmaError, ValueError):
    """Invalid configuration, stage ordering, or API misuse."""

    exit_code = 2


class DataError(PemmaError, ValueError):
    """Malformed or missing input data."""

    exit_code = 3


class NumericError(PemmaError, FloatingPointError):
    """NaN or non-finite values appeared during a computation."""

    exit_code = 4


class TapeError(PemmaError, RuntimeError):
    pass


class ShapeError(PemmaError, ValueError):
    pass


class ModalityError(ConfigError):
    """Requested inference mode needs a modality the model or case lacks."""


class NotFittedError(ConfigError, _SklearnNotFitted):
    """Raised by estimators used before ``fit``; also an sklearn NotFittedError."""


class NiftiError(DataError):
    pass


class BadMagicError(NiftiError):
    pass


class UnsupportedDatatypeError(NiftiError):
    pass


class DimensionError(NiftiError):
    pass


class TruncatedPayloadError(NiftiError):
    pass


class CompressedFileError(NiftiError):
    pass


class CheckpointError(DataError):
    pass
