"""Exception hierarchy shared across the package.

Exit-code mapping used by the CLI:
  ConfigError        -> 1
  NotObservableError -> 2
  DomainError (and subclasses) -> 3
"""


class ObscostError(Exception):
    """Base class for all package errors."""


class ConfigError(ObscostError):
    """Malformed or inconsistent scenario configuration."""


class DimensionError(ObscostError):
    """Incompatible matrix/vector dimensions."""


class NotObservableError(ObscostError):
    """Gramian is numerically singular: the system is not observable."""

    def __init__(self, lambda_min: float, threshold: float, message: str = ""):
        self.lambda_min = lambda_min
        self.threshold = threshold
        text = message or (
            f"not observable: lambda_min={lambda_min:.3e} <= threshold={threshold:.3e}"
        )
        super().__init__(text)


class DomainError(ObscostError):
    """Evaluation or trajectory left the declared domain."""


class BoxExitError(DomainError):
    """A characteristic or Hamiltonian trajectory left the declared box."""

    def __init__(self, time: float, point, message: str = ""):
        self.time = time
        self.point = point
        super().__init__(message or f"trajectory left the domain box at t={time:.6g}: {point}")


class CutoffCrossingError(DomainError):
    """A bicharacteristic dropped below the frequency-cutoff radius."""

    def __init__(self, time: float, xi_norm: float, floor: float):
        self.time = time
        self.xi_norm = xi_norm
        self.floor = floor
        super().__init__(
            f"|xi(t)| = {xi_norm:.6g} fell below the cutoff radius {floor:.3g} at t={time:.6g}"
        )


class GapViolationError(DomainError):
    """Eigenvalue branches of a system symbol came closer than allowed."""

    def __init__(self, point, gap: float, message: str = ""):
        self.point = point
        self.gap = gap
        super().__init__(message or f"eigenvalue gap {gap:.3e} too small at {point}")


class IntegrationError(ObscostError):
    """Non-finite state encountered during ODE integration."""

    def __init__(self, time: float):
        self.time = time
        super().__init__(f"non-finite state during integration at t={time:.6g}")


class SymbolError(ObscostError):
    """Symbol parse or evaluation failure."""


class SymbolParseError(SymbolError):
    """Syntax error in a symbol expression; carries the byte offset."""

    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (at offset {offset})")


class SymbolDomainError(SymbolError, DomainError):
    """A division node was evaluated too close to its singular set."""
