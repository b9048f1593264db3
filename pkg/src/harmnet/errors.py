"""Exception types shared across the library."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigError(ValueError):
    """A configuration value violates a documented constraint."""


class ContractError(ValueError):
    """A call violates an operation's precondition (e.g. non-scalar loss)."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values."""


class ParseError(ValueError):
    """A data file is malformed; message carries byte offset or line number."""


class IntegrityError(ValueError):
    """A checkpoint or data file failed its checksum / version check."""


class DataNotFoundError(FileNotFoundError):
    """A required dataset file is missing; message carries download hints."""
