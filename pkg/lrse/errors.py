"""Exception hierarchy shared by every lrse module."""


class LrseError(Exception):
    """Base class for all errors raised by lrse."""


class ShapeError(LrseError, ValueError):
    """Operand dimensions do not line up."""


class RangeError(LrseError, ValueError):
    """An index, rank or count lies outside its admissible range."""


class UsageError(LrseError):
    """The caller asked for something that cannot be done with the given inputs."""


class ContractError(LrseError):
    """A numerical precondition of an operation does not hold."""


class ConvergenceError(LrseError, ArithmeticError):
    """An iterative solver stopped at its iteration cap.

    Attributes:
        residual (float): Off-diagonal Frobenius norm when the solver gave up.
        sweeps (int): Number of sweeps performed.
    """

    def __init__(self, residual: float, sweeps: int):
        self.residual = residual
        self.sweeps = sweeps
        super().__init__(f"no convergence after {sweeps} sweeps (residual {residual:.3e})")


class DataError(LrseError):
    """Numerical data is unusable, e.g. non-finite activations at a tap."""

    def __init__(self, message: str, tap=None):
        self.tap = tap
        super().__init__(message if tap is None else f"{tap}: {message}")


class ArchiveError(LrseError):
    """Base class for LRTA0001 parse errors."""


class BadMagicError(ArchiveError):
    pass


class TruncatedArchiveError(ArchiveError):
    pass


class OverlappingTensorsError(ArchiveError):
    pass


class UnknownDtypeError(ArchiveError):
    pass


class ManifestError(ArchiveError):
    pass
