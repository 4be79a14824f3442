"""Exception types raised across the package."""


class SdpCertError(Exception):
    """Base class for all package errors."""


class InvalidInputError(SdpCertError, ValueError):
    pass


class CapacityError(SdpCertError):
    """Raised when an exact routine would exceed its enumeration budget."""


class InvalidCertificateError(SdpCertError):
    """Certificate does not belong to the network it is applied to."""


class ParseError(SdpCertError, ValueError):
    def __init__(self, message, offset=None, path=None):
        self.offset = offset
        self.path = path
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte offset {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class ConfigError(SdpCertError, ValueError):
    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        if line is not None:
            message = f"{path or '<config>'}:{line}: {message}"
        super().__init__(message)


class DivergenceError(SdpCertError, FloatingPointError):
    """Training produced a non-finite loss."""


class IntegrityError(SdpCertError):
    """Lower and upper bounds disagree, or inputs were produced by different weights."""
