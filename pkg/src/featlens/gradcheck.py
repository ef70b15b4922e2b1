__all__ = ["grad_check"]

from typing import Callable

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, double_precision, no_grad
from .types import ArrayLike


def grad_check(
    f: Callable[[Tensor], Tensor],
    point: ArrayLike,
    eps: float = 1e-6,
) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    Everything is recomputed in float64. The caller picks a point away from
    kinks (ReLU zeros, top-K ties) and asserts the threshold.
    """
    with double_precision():
        base = np.array(point, dtype=np.float64)
        x = Tensor(base, requires_grad=True)
        out = f(x)
        if out.size != 1:
            raise ShapeError(f"grad_check needs a scalar function, got shape {out.shape}")
        out.backward()
        analytic = np.zeros_like(base) if x.grad is None else x.grad
        numeric = np.zeros_like(base)
        with no_grad():
            for i in range(base.size):
                shifted = base.copy()
                shifted.flat[i] += eps
                f_plus = f(Tensor(shifted)).item()
                shifted.flat[i] -= 2 * eps
                f_minus = f(Tensor(shifted)).item()
                numeric.flat[i] = (f_plus - f_minus) / (2 * eps)
    error = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(error.max()) if error.size else 0.0
