"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid layer/model/run configuration (bad shapes, k > N, ...)."""


class DataError(ValueError):
    """Malformed input data (class ids out of range, empty masks, ...)."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int):
        super().__init__(f"non-finite loss at training step {step}")
        self.step = step
