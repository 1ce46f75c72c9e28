"""Exception hierarchy. The CLI maps each family to a distinct exit code."""


class PipebenchError(Exception):
    exit_code = 5
    kind = "internal"


class ConfigError(PipebenchError):
    exit_code = 2
    kind = "config"


class DataError(PipebenchError):
    exit_code = 3
    kind = "data"


class GenerationError(DataError):
    """Rejection sampling could not produce a valid scene."""


class DivergenceError(PipebenchError):
    exit_code = 4
    kind = "divergence"

    def __init__(self, step: int, loss: float, stage: str = ""):
        self.step = step
        self.loss = loss
        self.stage = stage
        where = f"{stage} " if stage else ""
        super().__init__(f"{where}training diverged at step {step} (loss={loss})")


class DecodeError(ValueError):
    """A token sequence could not be read back as digits."""

    def __init__(self, message: str, position: int | None = None):
        self.position = position
        super().__init__(message)


class ShapeError(ValueError):
    pass


class CheckpointError(PipebenchError):
    exit_code = 3
    kind = "data"
