"""Exception hierarchy shared across the package."""


class PlantsError(Exception):
    """Base class for all package errors."""


class ShapeError(PlantsError, ValueError):
    """Operand shapes are incompatible for an operation."""

    def __init__(self, op: str, *shapes, detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        shown = " and ".join(str(s) for s in self.shapes)
        msg = f"{op}: incompatible shapes {shown}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class DomainError(PlantsError, ArithmeticError):
    """An operation received values outside its mathematical domain."""


class PeriodDetectionError(PlantsError, ValueError):
    """No usable dominant period was found; carries a suggested fixed window."""

    def __init__(self, message: str, suggested_window: int):
        self.suggested_window = suggested_window
        super().__init__(f"{message}; pass explicit windows instead (suggested window: {suggested_window})")


class DataError(PlantsError, ValueError):
    """Malformed or invalid input data."""


class ConfigError(PlantsError, ValueError):
    """Invalid configuration."""


class NumericError(PlantsError, ArithmeticError):
    """Training or evaluation produced non-finite values."""
