"""Exception hierarchy. ``exit_code`` is what the CLI returns for each kind."""


class CannyEditError(Exception):
    exit_code = 1


class IOFailure(CannyEditError, OSError):
    exit_code = 3


class UnsupportedFormat(IOFailure):
    pass


class InvalidRequest(CannyEditError, ValueError):
    exit_code = 4


class ShapeMismatch(CannyEditError, ValueError):
    pass


class NonFinite(CannyEditError, FloatingPointError):
    exit_code = 5


class MissingKey(CannyEditError, KeyError):
    pass
