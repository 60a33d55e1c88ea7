"""Exception hierarchy shared across the package."""


class FedBenchError(Exception):
    """Base class for all package errors."""


class ConfigurationError(FedBenchError, ValueError):
    pass


class ShapeError(FedBenchError, ValueError):
    pass


class NumericError(FedBenchError, ArithmeticError):
    """Non-finite values appeared; ``layer`` names the offending segment when known."""

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class UndefinedMetricError(FedBenchError, ValueError):
    pass


class ParseError(FedBenchError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SchemaError(FedBenchError, ValueError):
    pass
