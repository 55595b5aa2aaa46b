"""Exception types shared across the package."""


class TKGError(Exception):
    """Base class for all package errors."""


class ParseError(TKGError):
    def __init__(self, message, line_number=None, source=None):
        self.line_number = line_number
        self.source = source
        where = ""
        if source is not None:
            where += f"{source}:"
        if line_number is not None:
            where += f"{line_number}:"
        super().__init__(f"{where} {message}" if where else message)


class BoundsError(TKGError):
    pass


class EmptySplitError(TKGError):
    pass


class ContractViolation(TKGError):
    """Raised when a caller breaks a documented precondition."""


class NonFiniteError(TKGError, FloatingPointError):
    pass


class ConfigError(TKGError):
    pass


class CheckpointError(TKGError):
    pass
