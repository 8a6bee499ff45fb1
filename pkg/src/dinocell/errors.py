"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class DinocellError(Exception):
    exit_code = 1


class ConfigError(DinocellError, ValueError):
    exit_code = 2


class RangeError(ConfigError):
    """Argument outside its admissible range (step, k, lambda, ...)."""


class MappingError(ConfigError):
    """Invalid channel map: unknown source, duplicate or out-of-range slot."""


class LookupFailure(ConfigError, KeyError):
    pass


class DataError(DinocellError, ValueError):
    exit_code = 3


class ShapeError(DataError):
    pass


class CorruptionError(DataError):
    pass


class ResolutionError(DataError):
    """A referenced artifact (checkpoint, dataset, embedding file) is missing."""

    def __init__(self, path, what="artifact"):
        super().__init__(f"missing {what}: {path}")
        self.path = path


class ContractError(DinocellError, ValueError):
    exit_code = 3


class NumericError(DinocellError, ArithmeticError):
    exit_code = 4
