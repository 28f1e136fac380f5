"""
Exception hierarchy for the FlowSeed planner.

CLI exit codes map onto these: usage problems exit 1, every FlowSeedError raised while a
subcommand runs exits 2.
"""


class FlowSeedError(Exception):
    """Base class for all planner errors."""


class ConfigurationError(FlowSeedError, ValueError):
    """Missing parameter, bad hyperparameter, or incompatible checkpoint."""


class InputError(FlowSeedError, ValueError):
    """An argument is outside its documented range."""


class ShapeError(FlowSeedError, ValueError):
    """Tensor shapes do not agree at an op node."""

    def __init__(self, op: str, message: str):
        self.op = op
        super().__init__(f"[{op}] {message}")


class NumericalError(FlowSeedError, RuntimeError):
    """A NaN or Inf appeared where finite values are required."""

    def __init__(self, where: str, message: str = "non-finite value"):
        self.where = where
        super().__init__(f"[{where}] {message}")


class TapeStateError(FlowSeedError, RuntimeError):
    """Backward requested on a tape that has no pending forward pass."""


class SchemaError(FlowSeedError, RuntimeError):
    """Stored dataset or manifest does not match the expected schema version."""


class ExpertFailure(FlowSeedError, RuntimeError):
    """No feasible expert trajectory could be produced for a problem."""


class DatasetWriteError(FlowSeedError, RuntimeError):
    """Writing dataset files failed; partial files have been removed."""
