__all__ = [
    "ShapeError",
    "NonFiniteError",
    "FrozenParameterError",
    "MissingGradientError",
    "DivergenceError",
    "HostDriftError",
    "DegenerateInputError",
    "IdxFormatError",
    "CheckpointError",
    "UnresolvedBinError",
]


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class FrozenParameterError(RuntimeError):
    pass


class MissingGradientError(RuntimeError):
    pass


class DivergenceError(RuntimeError):
    pass


class HostDriftError(RuntimeError):
    """Frozen host parameters changed during a run that must not touch them."""


class DegenerateInputError(ValueError):
    pass


class IdxFormatError(ValueError):
    def __init__(self, path, reason: str):
        super().__init__(f"{path}: {reason}")
        self.path = path
        self.reason = reason


class CheckpointError(ValueError):
    pass


class UnresolvedBinError(KeyError):
    pass
