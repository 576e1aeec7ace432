"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class MarginalError(ValueError):
    """A transport marginal or plan violates its contract."""


class SolverError(RuntimeError):
    """An optimal-transport solve failed or was refused."""


class AlignmentError(RuntimeError):
    """Model alignment failed; the message carries the offending layer."""


class DatasetError(ValueError):
    """A dataset, partition, or data file is invalid."""


class ConfigError(ValueError):
    """An experiment configuration is malformed or out of range."""
