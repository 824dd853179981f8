"""Exception hierarchy. Each family maps onto one CLI exit code."""


class WRNError(Exception):
    exit_code = 1


class ShapeError(WRNError, ValueError):
    """Structural error: incompatible shapes, axes or dimensions."""

    exit_code = 2


class PrecisionError(ShapeError):
    """Tensors of different precision modes were mixed on one tape."""


class ConfigError(WRNError, ValueError):
    exit_code = 2


class DataError(WRNError):
    exit_code = 4


class DegenerateError(DataError):
    """Statistics are undefined (zero variance, single-element batch)."""


class NumericError(WRNError, ArithmeticError):
    exit_code = 3


class DivergenceError(NumericError):
    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch
        self.loss = loss


class CheckpointError(WRNError):
    exit_code = 5
