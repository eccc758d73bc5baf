"""Exception hierarchy.

Every error carries the CLI exit code of its family so the command-line
layer can map failures without a lookup table.
"""


class MsgrError(Exception):
    exit_code = 1


class ConfigError(MsgrError, ValueError):
    """Invalid hyperparameter, flag or simulation setting."""

    exit_code = 2


class DataError(MsgrError, ValueError):
    """Input data that violates a structural contract."""

    exit_code = 3


class NumericalError(MsgrError, ArithmeticError):
    """A numerical routine produced something it should not have."""

    exit_code = 4


# config family
class InvalidRho(ConfigError):
    pass


class InvalidShape(ConfigError):
    pass


# data family
class MissingColumn(DataError):
    pass


class ShapeMismatch(DataError):
    pass


class NonFiniteValue(DataError):
    pass


class DegenerateGeometry(DataError):
    pass


class DegenerateInput(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class TooManyCells(ConfigError):
    pass


class MissingNode(DataError):
    pass


class EdgeNotSelected(DataError):
    pass


class SubsetTooSmall(DataError):
    pass


# numerical family
class NonFiniteBasis(NumericalError):
    pass


class NonPositiveRate(NumericalError):
    pass


class CholeskyFailure(NumericalError):
    pass


class SingularDesign(NumericalError):
    pass


class SingularPrior(NumericalError):
    pass


class NonPD(NumericalError):
    pass
