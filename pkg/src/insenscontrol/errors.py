"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class InsensError(Exception):
    exit_code = 1


class ConfigError(InsensError, ValueError):
    """A configuration invariant is violated."""

    exit_code = 2


class ExponentWindowError(ConfigError):
    """Reaction exponents outside the admissible (H2)/(A2) window."""


class WeightHypothesisError(ConfigError):
    """The Carleman weight eta0 cannot satisfy its defining properties."""


class MeshMismatchError(InsensError, ValueError):
    exit_code = 2


class NumericalError(InsensError, RuntimeError):
    exit_code = 3


class LinearSolveError(NumericalError):
    pass


class FixedPointDivergence(NumericalError):
    """Contraction lost: the data are too large for the fixed-point map."""


class FixedPointMaxIterations(NumericalError):
    pass


class CGNonConvergence(NumericalError):
    pass


class WeightedSourceError(InsensError, ValueError):
    """Source terms violate the weighted finiteness precondition."""

    exit_code = 2


class OutputError(InsensError, OSError):
    """Reading an input file or writing an artifact failed."""

    exit_code = 4
