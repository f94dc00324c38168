"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand extents are incompatible."""


class ContractError(RuntimeError):
    """An operation was called outside its documented contract."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf from finite inputs."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class InputError(ValueError):
    """Bad model input (out-of-vocabulary id, overlength sequence, ...)."""


class DivergenceError(RuntimeError):
    def __init__(self, step: int, message: str = "loss became non-finite"):
        super().__init__(f"step {step}: {message}")
        self.step = step
