"""Exception categories raised across the package."""


class LocasError(Exception):
    """Base class; ``category`` is the short name reported by the CLI."""

    category = "LocasError"


class NumericalError(LocasError):
    category = "NumericalError"


class ShapeError(LocasError, ValueError):
    category = "ShapeError"


class DegenerateGradient(NumericalError):
    category = "DegenerateGradient"


class DegenerateActivation(NumericalError):
    category = "DegenerateActivation"


class CapacityError(LocasError, ValueError):
    category = "CapacityError"


class FormatError(LocasError):
    category = "FormatError"
