"""Exception types shared across the package."""


class NFSMError(Exception):
    """Base class for all package errors."""


class ShapeError(NFSMError, ValueError):
    pass


class NumericError(NFSMError, ArithmeticError):
    pass


class FormatError(NFSMError, ValueError):
    """A binary or text file does not follow its declared layout."""


class ConfigError(NFSMError, ValueError):
    pass
