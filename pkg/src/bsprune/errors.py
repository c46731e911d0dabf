"""Exception hierarchy. The CLI maps each family to an exit code."""


class BsPruneError(Exception):
    exit_code = 1


class ShapeError(BsPruneError, ValueError):
    """Tensor or graph shapes do not line up."""


class ConfigError(BsPruneError, ValueError):
    exit_code = 2


class NumericError(BsPruneError, ArithmeticError):
    exit_code = 3


class ConvergenceError(NumericError):
    def __init__(self, message, residual):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


class DecompositionError(BsPruneError, ValueError):
    pass


class PruningError(BsPruneError, ValueError):
    pass


class CheckpointError(BsPruneError, OSError):
    exit_code = 4


class DataError(BsPruneError, OSError):
    exit_code = 4
