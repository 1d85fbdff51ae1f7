"""Exception types shared across the package."""


class ACFlowError(Exception):
    """Base class for all package errors."""


class ShapeError(ACFlowError, ValueError):
    """Operand shapes do not conform for an operation."""

    def __init__(self, op, message, shapes=()):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        detail = f" (shapes: {', '.join(map(str, self.shapes))})" if self.shapes else ""
        super().__init__(f"{op}: {message}{detail}")


class DomainError(ACFlowError, ValueError):
    """An input lies outside the domain of an operation (e.g. log of a non-positive)."""

    def __init__(self, op, message):
        self.op = op
        super().__init__(f"{op}: {message}")


class MaskError(ACFlowError, ValueError):
    """Bitmask lengths or contents are inconsistent."""


class NumericalError(ACFlowError, ArithmeticError):
    """A transform could not be evaluated stably (e.g. a singular linear map)."""

    def __init__(self, message, layer=None):
        self.layer = layer
        where = f"layer {layer}: " if layer is not None else ""
        super().__init__(where + message)


class CheckpointError(ACFlowError, IOError):
    """A checkpoint file is corrupt, truncated, or of an unsupported version."""


class DataError(ACFlowError, ValueError):
    """Input data could not be parsed or is degenerate."""

    def __init__(self, message, row=None, column=None):
        self.row = row
        self.column = column
        loc = []
        if row is not None:
            loc.append(f"row {row}")
        if column is not None:
            loc.append(f"column {column!r}")
        prefix = f"{', '.join(loc)}: " if loc else ""
        super().__init__(prefix + message)


class TrainingError(ACFlowError, RuntimeError):
    """Training diverged and could not be recovered."""
