"""Exception hierarchy shared by every meflab module."""


class MeflabError(Exception):
    """Base class for all library errors."""


class ShapeError(MeflabError, ValueError):
    def __init__(self, message, layer=None):
        self.layer = layer
        if layer is not None:
            message = f"{layer}: {message}"
        super().__init__(message)


class NonFiniteError(MeflabError, FloatingPointError):
    pass


class ConfigError(MeflabError, ValueError):
    pass


class DivergenceError(MeflabError, RuntimeError):
    def __init__(self, epoch, message="training loss became non-finite"):
        self.epoch = epoch
        super().__init__(f"epoch {epoch}: {message}")


class CheckpointError(MeflabError, ValueError):
    pass


class FormatError(MeflabError, ValueError):
    """Malformed IDX or adversarial-batch file."""


class AlignmentError(MeflabError, RuntimeError):
    pass
