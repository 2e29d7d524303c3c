"""Exception hierarchy shared by all contlab modules."""


class ContlabError(Exception):
    """Base class for every error raised by contlab."""


class ContractError(ContlabError, ValueError):
    """A precondition of an operation was violated."""


class DimensionError(ContractError):
    pass


class UnsupportedOrderError(ContlabError):
    """Requested derivative order exceeds what the numeric path supports."""


class DivergenceError(ContlabError, FloatingPointError):
    """Particle state became non-finite during integration."""

    def __init__(self, particle: int, time: float):
        self.particle = particle
        self.time = time
        super().__init__(f"non-finite state for particle {particle} at t={time:.12g}")


class CFLError(ContlabError):
    """Time step exceeds the explicit stability limit."""

    def __init__(self, dt: float, admissible: float, kind: str = "CFL"):
        self.dt = dt
        self.admissible = admissible
        super().__init__(f"{kind} violation: dt={dt:.6g} exceeds admissible dt={admissible:.6g}")


class BoundaryLeakError(ContlabError):
    """Density support came within the guard band of the grid boundary."""


class StaleGridError(ContlabError):
    """Density grid is no longer normalised."""


class UnrecoverableError(ContlabError):
    """Velocity recovery masked every cell."""


class BinningError(ContlabError):
    """Conditioning bins hold too few samples."""

    def __init__(self, message: str, suggested_width):
        self.suggested_width = suggested_width
        super().__init__(f"{message}; suggested bin width {suggested_width}")


class ConfigError(ContlabError):
    """Invalid experiment configuration; ``key`` names the offending entry."""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")
