"""Exception types shared across moelab."""


class MoeLabError(Exception):
    pass


class InvalidArgumentError(MoeLabError, ValueError):
    """A parameter is out of its allowed range."""


class InvalidInputError(MoeLabError, ValueError):
    """Data passed in is malformed (non-finite values, bad token ids, ...)."""


class NumericalError(MoeLabError, ArithmeticError):
    """Divergence, NaN losses or an iterative routine that failed to converge."""


class FormatError(MoeLabError, ValueError):
    """A serialized artifact could not be parsed."""
