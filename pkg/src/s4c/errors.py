"""Exception hierarchy shared by every module."""


class S4CError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(S4CError, ValueError):
    pass


class ArgumentError(S4CError, ValueError):
    pass


class CapacityError(S4CError):
    """Context window exhausted."""


class ModelError(S4CError):
    pass


class WeightFormatError(ModelError):
    pass


class StructureError(S4CError, ValueError):
    """Malformed draft tree (cycle, bad ordering, bad depth)."""


class MeasurementError(S4CError, ValueError):
    pass


class EmptyStatsError(S4CError, ValueError):
    pass


class NumericError(S4CError, ArithmeticError):
    pass


class TrainingError(NumericError):
    def __init__(self, message: str, epoch: int):
        super().__init__(f"epoch {epoch}: {message}")
        self.epoch = epoch
