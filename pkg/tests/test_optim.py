import numpy as np
import pytest

from featlens.errors import FrozenParameterError, MissingGradientError
from featlens.optim import SGD
from featlens.tensor import Tensor


def _param(value: float) -> Tensor:
    return Tensor([value], requires_grad=True, name="p")


def test_sgd_plain_step():
    p = _param(1.0)
    optimizer = SGD([p], lr=0.1, momentum=0.0)
    p.grad = np.array([1.0], dtype=np.float32)
    optimizer.step()
    assert p.data[0] == pytest.approx(0.9)
    assert p.grad is None


def test_sgd_momentum():
    p = _param(0.0)
    optimizer = SGD([p], lr=0.1, momentum=0.9)
    for _ in range(2):
        p.grad = np.array([1.0], dtype=np.float32)
        optimizer.step()
    # v1 = 1, v2 = 1.9
    assert p.data[0] == pytest.approx(-0.29, rel=1e-6)


def test_sgd_skips_frozen():
    p = _param(1.0)
    p.freeze()
    optimizer = SGD([p], lr=0.1)
    for _ in range(3):
        optimizer.step()
    assert p.data[0] == 1.0
    assert p.grad is None


def test_sgd_missing_gradient():
    optimizer = SGD([_param(1.0)], lr=0.1)
    with pytest.raises(MissingGradientError):
        optimizer.step()


def test_sgd_invalid_settings():
    with pytest.raises(ValueError):
        SGD([_param(1.0)], lr=0.0)
    with pytest.raises(ValueError):
        SGD([_param(1.0)], lr=0.1, momentum=1.0)


def test_unfreeze_is_an_error():
    p = _param(1.0)
    p.freeze()
    with pytest.raises(FrozenParameterError):
        p.requires_grad = True
