"""Exception types shared across the package."""


class MshcError(Exception):
    """Base class for all package errors."""


class DimensionError(MshcError, ValueError):
    pass


class ConfigurationError(MshcError, ValueError):
    pass


class DataError(MshcError, ValueError):
    pass


class FormatError(DataError):
    pass


class ContractError(MshcError, RuntimeError):
    pass


class NumericalError(MshcError, ArithmeticError):
    """Raised when training produces a non-finite loss."""


class GenerationError(MshcError, RuntimeError):
    pass
