class DomexpError(Exception):
    """Base class for all package errors."""


class DimensionError(DomexpError, ValueError):
    pass


class InvalidTemperatureError(DomexpError, ValueError):
    pass


class LayoutMismatchError(DomexpError, ValueError):
    pass


class ConfigError(DomexpError, ValueError):
    pass


class DatasetError(DomexpError, ValueError):
    pass


class ParseError(DatasetError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
