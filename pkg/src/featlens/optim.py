from __future__ import annotations

__all__ = ["SGD"]

from typing import Dict, Iterable, Optional

import numpy as np

from .errors import MissingGradientError
from .tensor import Tensor


class SGD:
    """SGD with heavy-ball momentum: v <- m*v + grad; p <- p - lr*v.

    Frozen tensors are skipped; gradients are cleared after every step.
    """

    def __init__(self, params: Iterable[Tensor], lr: float, momentum: float = 0.9):
        if lr <= 0:
            raise ValueError(f"lr must be positive, got {lr}")
        if not 0 <= momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self._velocity: Dict[int, np.ndarray] = {}

    def step(self, lr: Optional[float] = None):
        lr = self.lr if lr is None else lr
        if lr <= 0:
            raise ValueError(f"lr must be positive, got {lr}")
        trainable = [p for p in self.params if not p.frozen and p.requires_grad]
        for p in trainable:
            if p.grad is None:
                raise MissingGradientError(f"no gradient for trainable parameter {p.name}")
        for p in trainable:
            v = self._velocity.get(id(p))
            v = p.grad.copy() if v is None else self.momentum * v + p.grad
            self._velocity[id(p)] = v
            p.data = (p.data - lr * v).astype(p.data.dtype)
        self.zero_grad()

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()
