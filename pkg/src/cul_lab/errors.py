"""Exception types. ``exit_code`` is what the CLI returns for each."""


class CulLabError(Exception):
    exit_code = 1


class ConfigError(CulLabError, ValueError):
    exit_code = 2


class UsageError(CulLabError, ValueError):
    exit_code = 2


class StructuralError(CulLabError, ValueError):
    """Shape or length mismatch between vectors, models or checkpoints."""

    exit_code = 2


class UnknownIdError(CulLabError, KeyError):
    exit_code = 2


class GateError(CulLabError):
    """Pretrained base model failed its quality gates."""

    exit_code = 3

    def __init__(self, message, metrics=None):
        super().__init__(message)
        self.metrics = metrics or {}


class NumericalError(CulLabError, ArithmeticError):
    exit_code = 4

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
