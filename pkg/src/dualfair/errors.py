"""Exception types shared across the package."""


class DualFairError(Exception):
    pass


class DimensionError(DualFairError, ValueError):
    pass


class InputError(DualFairError, ValueError):
    pass


class NumericalError(DualFairError, ArithmeticError):
    pass


class EvaluationError(NumericalError):
    pass


class StateError(DualFairError, RuntimeError):
    pass


class MetricUndefinedError(DualFairError, ValueError):
    pass


class SpecError(DualFairError, ValueError):
    pass


class ParseError(DualFairError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SchemaError(DualFairError, ValueError):
    pass


class IntegrityError(DualFairError, IOError):
    pass


class VersionError(IntegrityError):
    pass
