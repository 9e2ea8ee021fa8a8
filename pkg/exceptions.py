class HydroValueError(Exception):
    """Base exception for hydrovalue operations."""
    pass


class ValidationError(HydroValueError):
    """Raised when a configuration, topology or model input fails validation."""
    pass


class ResourceNotFoundError(HydroValueError):
    """Raised when a required artifact or configuration file is missing."""
    pass


class ResourceLimitError(HydroValueError):
    """Raised when a request exceeds an enumeration or allocation guard."""
    pass


class SolverError(HydroValueError):
    """Raised when the LP engine fails or a program is malformed."""
    pass


class InfeasibleStageError(HydroValueError):
    """Raised when an intrastage problem has no feasible schedule for W."""
    pass


class StorageError(HydroValueError):
    """Raised when reading or writing a result file fails."""
    pass


class SimulationError(HydroValueError):
    """Raised when a Monte Carlo operation simulation fails."""
    pass
