"""Exception types shared across the package.

The CLI maps these onto exit codes: usage problems exit 1, data and file
format problems exit 2, numeric failures exit 3.
"""


class ShapeError(ValueError):
    """Operand shapes violate an operation's precondition."""


class GradientError(RuntimeError):
    """Backward called on something that cannot be differentiated."""


class EmptyTargetError(ValueError):
    """A loss was asked to average over zero valid target positions."""


class VocabError(KeyError):
    """Unknown token/object id or word."""


class ConfigError(ValueError):
    """Bad configuration key, value, or flag combination."""


class DataError(ValueError):
    """Corpus/manifest/feature data violates a contract."""


class FormatError(ValueError):
    """A binary or text artifact does not match its file format."""


class NumericError(ArithmeticError):
    """Non-finite values where the pipeline requires finite ones."""
