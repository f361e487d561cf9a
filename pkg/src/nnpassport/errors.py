"""Exception hierarchy shared by every module of the toolkit."""


class PassportToolkitError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(PassportToolkitError, ValueError):
    pass


class LabelError(PassportToolkitError, ValueError):
    pass


class NumericsError(PassportToolkitError, ArithmeticError):
    pass


class RangeError(PassportToolkitError, ValueError):
    pass


class PassportError(PassportToolkitError):
    pass


class DataError(PassportToolkitError, ValueError):
    pass


class FormatError(PassportToolkitError):
    pass


class AttackError(PassportToolkitError):
    pass


class VerificationError(PassportToolkitError):
    pass


class ConfigError(PassportToolkitError, ValueError):
    pass
