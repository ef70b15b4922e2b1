from __future__ import annotations

__all__ = [
    "Module",
    "Conv2d",
    "Linear",
    "he_normal",
]

import hashlib
from typing import Dict, Iterator, List, Mapping, Optional, Tuple

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, conv2d, fully_connected
from .types import NamedTensors


def he_normal(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(np.float32)


class Module:
    """Named parameter tree; parameters are leaf tensors."""

    def __init__(self):
        self._params: Dict[str, Tensor] = {}
        self._children: Dict[str, Module] = {}

    def add_parameter(self, name: str, data: np.ndarray) -> Tensor:
        param = Tensor(np.asarray(data, dtype=np.float32), requires_grad=True, name=name)
        self._params[name] = param
        return param

    def add_module(self, name: str, module: Module) -> Module:
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, param in self._params.items():
            yield prefix + name, param
        for child_name, child in self._children.items():
            yield from child.named_parameters(prefix + child_name + ".")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> NamedTensors:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Mapping[str, np.ndarray], strict: bool = True):
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            unexpected = sorted(set(state) - set(own))
            if missing or unexpected:
                raise KeyError(f"state mismatch: missing={missing}, unexpected={unexpected}")
        for name, value in state.items():
            if name not in own:
                continue
            param = own[name]
            if tuple(value.shape) != param.shape:
                raise ShapeError(f"{name}: expected {param.shape}, got {tuple(value.shape)}")
            param.data = np.array(value, dtype=param.data.dtype)

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for name, p in sorted(self.named_parameters(), key=lambda item: item[0]):
            digest.update(name.encode("utf-8"))
            digest.update(np.ascontiguousarray(p.data).tobytes())
        return digest.hexdigest()

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv2d(Module):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        rng: np.random.Generator,
        stride: int = 1,
        pad: Optional[int] = None,
        bias: bool = True,
        zero_init: bool = False,
    ):
        super().__init__()
        self.stride = stride
        self.pad = kernel_size // 2 if pad is None else pad
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        if zero_init:
            weight = np.zeros(shape, dtype=np.float32)
        else:
            weight = he_normal(rng, shape, in_channels * kernel_size * kernel_size)
        self.weight = self.add_parameter("weight", weight)
        self.bias = self.add_parameter("bias", np.zeros(out_channels)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        super().__init__()
        weight = rng.normal(0.0, np.sqrt(1.0 / in_features), size=(out_features, in_features))
        self.weight = self.add_parameter("weight", weight)
        self.bias = self.add_parameter("bias", np.zeros(out_features))

    def forward(self, x: Tensor) -> Tensor:
        return fully_connected(x, self.weight, self.bias)
