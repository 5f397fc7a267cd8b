"""Exception types raised across the package."""


class AsanetError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(AsanetError, ValueError):
    pass


class GeometryError(AsanetError, ValueError):
    pass


class ContractError(AsanetError, ValueError):
    pass


class GraphIntegrityError(AsanetError, RuntimeError):
    pass


class NumericalInstabilityError(AsanetError, ArithmeticError):
    pass


class DataError(AsanetError, ValueError):
    pass


class ConfigError(AsanetError, ValueError):
    pass


class RegistryError(AsanetError, KeyError):
    def __str__(self):
        # KeyError quotes its argument; keep the message readable
        return str(self.args[0]) if self.args else ""


class EmptyEvaluationError(AsanetError, ValueError):
    pass
