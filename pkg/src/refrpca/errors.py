"""Exception hierarchy shared by all modules."""


class RpcaError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(RpcaError, ValueError):
    pass


class ParameterError(RpcaError, ValueError):
    pass


class ConfigError(RpcaError, ValueError):
    pass


class NumericalError(RpcaError, ArithmeticError):
    """Non-convergence, NaN/Inf blow-up or similar numerical failure.

    ``iteration`` is set when the failure happened inside an iterative
    solver or training loop.
    """

    def __init__(self, message, iteration=None):
        if iteration is not None:
            message = f"{message} (iteration {iteration})"
        super().__init__(message)
        self.iteration = iteration


class FormatError(RpcaError, ValueError):
    """Malformed URPC tensor/container file."""


class IdxError(FormatError):
    pass


class IdxMagicError(IdxError):
    def __init__(self, expected, found, path=None):
        where = f" in {path}" if path else ""
        super().__init__(f"bad IDX magic{where}: expected 0x{expected:08x}, found 0x{found:08x}")
        self.expected = expected
        self.found = found


class IdxTruncatedError(IdxError):
    pass


class IdxCountError(IdxError):
    pass
