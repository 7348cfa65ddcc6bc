"""Exception hierarchy shared by all modules."""


class CatConfineError(Exception):
    """Base class for package errors."""


class InvalidSpaceError(CatConfineError, ValueError):
    """Fock space descriptor is unusable (dim too small, mismatched spaces)."""


class TruncationError(CatConfineError):
    """A state or eigenpair is not converged with respect to the Fock cutoff.

    Attributes
    ----------
    tail : float
        Measured population (or relative shift) that triggered the error.
    """

    def __init__(self, msg: str, tail: float = float("nan")):
        super().__init__(msg)
        self.tail = tail


class UnsupportedParameterError(CatConfineError, ValueError):
    """Parameter outside the supported domain (e.g. complex alpha for J_z)."""


class ConsistencyError(CatConfineError):
    """Two independent computation routes disagree beyond tolerance."""

    def __init__(self, msg: str, worst_index: int = -1, deviation: float = float("nan")):
        super().__init__(msg)
        self.worst_index = worst_index
        self.deviation = deviation


class IntegrationError(CatConfineError, RuntimeError):
    """Time integration failed (step-size underflow, non-finite state)."""

    def __init__(self, msg: str, t: float = float("nan")):
        super().__init__(msg)
        self.t = t


class FitError(CatConfineError, ValueError):
    """Fit window too short, too few points or residual above threshold."""


class MemoryBudgetError(CatConfineError, MemoryError):
    """Requested dense density-matrix simulation exceeds the memory budget."""


class NearResonanceError(CatConfineError, ValueError):
    """A pump frequency sits too close to a circuit mode."""


class ConfigError(CatConfineError, ValueError):
    """Experiment configuration failed validation."""

    def __init__(self, msg: str, path: str = ""):
        super().__init__(f"{path}: {msg}" if path else msg)
        self.path = path
