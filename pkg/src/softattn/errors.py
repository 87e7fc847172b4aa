"""Exception hierarchy shared by every softattn module."""


class SoftAttnError(Exception):
    """Base class for all errors raised by softattn."""


class ShapeError(SoftAttnError, ValueError):
    pass


class AxisError(ShapeError):
    pass


class ParameterError(SoftAttnError, ValueError):
    """An argument is outside its documented range."""


class ContractError(SoftAttnError, RuntimeError):
    """A precondition on call context was violated (e.g. non-scalar loss)."""


class NumericError(SoftAttnError, ArithmeticError):
    pass


class DataError(SoftAttnError, ValueError):
    pass


class SchemaError(DataError):
    pass


class DecodeError(DataError):
    pass


class ConfigError(SoftAttnError, ValueError):
    pass
