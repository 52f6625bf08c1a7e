"""Exception hierarchy shared across the workbench."""


class VoltbenchError(Exception):
    """Base class for all workbench errors."""


class ParseError(VoltbenchError):
    """Feeder file is malformed."""


class TopologyError(VoltbenchError):
    """Feeder graph is not a tree rooted at the substation."""


class UnitError(VoltbenchError):
    """Nonpositive or inconsistent base quantities."""


class DimensionError(VoltbenchError):
    """Vector or matrix sized inconsistently with the network."""


class ConvergenceError(VoltbenchError):
    """Power-flow sweeps exceeded the iteration cap (operating point near collapse)."""


class StepError(VoltbenchError):
    """Nonpositive finite-difference step."""


class InsufficientData(VoltbenchError):
    """Trajectory window holds too few samples to form increments."""


class ParameterError(VoltbenchError):
    """Parameter outside its admissible range."""


class SingularError(VoltbenchError):
    """Normal-equation factorization failed despite passing the excitation threshold."""


class InfeasibleError(VoltbenchError):
    """Constraint set is empty."""


class DegenerateDecrease(VoltbenchError):
    """Predicted decrease is numerically zero; the decrease ratio is undefined."""


class PlantError(VoltbenchError):
    """Plant simulation failed during a controller run."""


class BootstrapError(VoltbenchError):
    """Could not assemble an excited initial window within the retry budget."""


class SolverError(VoltbenchError):
    """Conic solve failed to reach the requested accuracy."""


class EmptyInput(VoltbenchError):
    """Aggregation called with no results."""


class IoError(VoltbenchError):
    """Result persistence failed."""
