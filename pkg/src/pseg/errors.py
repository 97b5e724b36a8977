"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: usage problems exit 1, anything that
derives from :class:`DataError` exits 2, :class:`NumericError` exits 3.
"""


class PsegError(Exception):
    """Base class for every error raised deliberately by this package."""


class UsageError(PsegError):
    pass


class ConfigError(PsegError, ValueError):
    pass


class ShapeError(PsegError, ValueError):
    """Incompatible tensor or array dimensions."""


class NumericError(PsegError, ArithmeticError):
    """A NaN or infinity appeared where finite values are required."""


class TapeError(PsegError, RuntimeError):
    pass


class DataError(PsegError):
    """Problems with files or data content handed to the package."""


class ParseError(DataError, ValueError):
    def __init__(self, path, message):
        self.path = str(path)
        super().__init__(f"{self.path}: {message}")


class MaskDomainError(ParseError):
    """A mask file holds a value outside {0, 255}."""


class LengthError(ParseError):
    """A file ends before its header says it should."""


class ChecksumError(ParseError):
    pass


class EmptyMaskError(DataError, ValueError):
    pass


class BoxError(DataError, ValueError):
    """A box with inverted or out-of-range corners."""


class ProvenanceError(PsegError, RuntimeError):
    """A zero-shot evaluation set overlaps a training domain."""


class FreezeViolation(PsegError, RuntimeError):
    """A parameter that was meant to stay frozen changed during training."""
