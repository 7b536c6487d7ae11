"""Exception types shared by all dpsr modules.

The CLI maps these onto process exit codes, so raising the right class
matters: NumericError -> 1, OSError -> 2, ContractError (and subclasses)
-> 3, ConfigError -> 4.
"""


class DpsrError(Exception):
    """Base class for all errors raised by this package."""


class ContractError(DpsrError):
    """A caller violated a documented precondition."""


class ShapeError(ContractError):
    """Operands have incompatible shapes."""


class FormatError(ContractError):
    """A file does not conform to its binary container format."""


class NumericError(DpsrError):
    """A computation produced non-finite values or an invalid scalar."""


class ConfigError(DpsrError):
    """A config file or key=value option could not be parsed."""
