"""Exception types raised across the package."""


class DebiasError(Exception):
    """Base class for all package errors."""


class ParseError(DebiasError):
    def __init__(self, path, lineno, msg):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.path = path
        self.lineno = lineno


class BoundsError(DebiasError, IndexError):
    pass


class DomainError(DebiasError, ValueError):
    pass


class InvariantError(DebiasError, ValueError):
    pass


class EstimationError(DebiasError, ValueError):
    pass


class TrainingError(DebiasError, RuntimeError):
    def __init__(self, msg, epoch=None):
        if epoch is not None:
            msg = f"epoch {epoch}: {msg}"
        super().__init__(msg)
        self.epoch = epoch


class UnsupportedLossError(DebiasError, NotImplementedError):
    pass


class ConfigError(DebiasError, ValueError):
    pass
