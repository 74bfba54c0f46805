"""Exception types raised across the toolkit."""


class ChangeRelError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1


class ManifestError(ChangeRelError):
    pass


class GeometryError(ChangeRelError, ValueError):
    pass


class ShapeError(ChangeRelError, ValueError):
    pass


class DegenerateInputError(ChangeRelError, ValueError):
    pass


class ParameterError(ChangeRelError, ValueError):
    pass


class ArityError(ChangeRelError, ValueError):
    pass


class CompatibilityError(ChangeRelError):
    pass


class ConfigError(ChangeRelError):
    exit_code = 2


class NumericalAbort(ChangeRelError):
    exit_code = 3
