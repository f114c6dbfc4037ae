class StableVSSError(Exception):
    """Base class for all package errors."""


class ShapeError(StableVSSError, ValueError):
    pass


class DomainError(StableVSSError, ValueError):
    pass


class DataError(StableVSSError, ValueError):
    pass


class ProtocolError(StableVSSError):
    """An evaluation protocol cannot be applied to the given video."""


class InfeasibleClipError(StableVSSError, ValueError):
    pass


class TensorFormatError(StableVSSError, IOError):
    pass


class BadMagicError(TensorFormatError):
    pass


class UnsupportedVersionError(TensorFormatError):
    pass


class UnsupportedDtypeError(TensorFormatError):
    pass


class TruncatedFileError(TensorFormatError):
    pass
