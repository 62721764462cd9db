"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor arguments have incompatible shapes for the requested op."""


class BuildError(ValueError):
    """A network/block configuration cannot be realized."""


class DataError(ValueError):
    """Dataset file is malformed or arguments are inconsistent."""


class SpecParseError(ValueError):
    """Malformed network/train spec text."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class TrainingDiverged(RuntimeError):
    """Loss or a gradient became non-finite during training."""

    def __init__(self, message, iteration=None, param=None):
        self.iteration = iteration
        self.param = param
        super().__init__(message)


class CheckpointError(RuntimeError):
    """Checkpoint file is unreadable or does not match the config."""
