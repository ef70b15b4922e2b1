from __future__ import annotations

__all__ = [
    "HostConfig",
    "Taps",
    "HostModel",
    "FrozenHost",
    "Xlayer",
    "build_host",
    "freeze",
]

from dataclasses import asdict, dataclass, fields
from typing import Dict, List, Mapping, Optional, Tuple, Union

import numpy as np

from .errors import ShapeError
from .nn import Conv2d, Linear, Module
from .tensor import Tensor, add, global_avg_pool, no_grad, relu
from .types import HW, NamedTensors


def _downsample(size: int) -> int:
    # 3x3 conv, pad 1, stride 2
    return (size - 1) // 2 + 1


@dataclass
class HostConfig:
    input_hw: HW = (56, 56)
    input_channels: int = 1
    class_count: int = 10
    # widths of the stride-2 basic-block stages before the bottleneck stage
    stage_widths: Tuple[int, ...] = (16, 32)
    # N: mid width of the last bottleneck blocks, which output 4N channels
    bottleneck_width: int = 64
    seed: int = 0

    def __post_init__(self):
        self.input_hw = tuple(int(v) for v in self.input_hw)  # type: ignore
        self.stage_widths = tuple(int(v) for v in self.stage_widths)
        if self.input_channels < 1 or self.class_count < 2 or self.bottleneck_width < 1:
            raise ValueError(f"invalid host config: {self}")

    @property
    def out_channels(self) -> int:
        return 4 * self.bottleneck_width

    @property
    def feature_hw(self) -> HW:
        h, w = self.input_hw
        for _ in range(len(self.stage_widths) + 1):
            h, w = _downsample(h), _downsample(w)
        return h, w

    def validate(self):
        h, w = self.input_hw
        for i in range(len(self.stage_widths) + 1):
            h, w = _downsample(h), _downsample(w)
            if min(h, w) < 2:
                raise ShapeError(
                    f"input {self.input_hw} underflows to {h}x{w} after downsampling stage {i + 1}"
                )

    @classmethod
    def from_dict(cls, obj: Mapping) -> HostConfig:
        return cls(**{f.name: obj[f.name] for f in fields(cls) if f.name in obj})

    def to_dict(self) -> dict:
        obj = asdict(self)
        obj["input_hw"] = list(self.input_hw)
        obj["stage_widths"] = list(self.stage_widths)
        return obj


@dataclass
class Taps:
    x0: Tensor  # shortcut into the last block, 4N channels
    x2: Tensor  # Conv2 output of the last block, N channels
    x3: Tensor  # Conv3 output of the last block, 4N channels
    X: Tensor  # block output after shortcut add and ReLU

    def crop(self, box: Tuple[int, int, int, int]) -> Taps:
        top, left, h, w = box
        window = (slice(None), slice(None), slice(top, top + h), slice(left, left + w))
        return Taps(*(getattr(self, name)[window] for name in ("x0", "x2", "x3", "X")))

    @property
    def feature_hw(self) -> HW:
        return self.X.shape[2], self.X.shape[3]


class BasicBlock(Module):
    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator):
        super().__init__()
        self.conv1 = self.add_module("conv1", Conv2d(in_channels, out_channels, 3, rng, stride=2))
        self.conv2 = self.add_module("conv2", Conv2d(out_channels, out_channels, 3, rng))
        self.shortcut = self.add_module(
            "shortcut", Conv2d(in_channels, out_channels, 1, rng, stride=2, pad=0)
        )

    def forward(self, x: Tensor) -> Tensor:
        out = self.conv2(relu(self.conv1(x)))
        return relu(add(out, self.shortcut(x)))


class Bottleneck(Module):
    def __init__(
        self,
        in_channels: int,
        width: int,
        rng: np.random.Generator,
        stride: int = 1,
        zero_last: bool = False,
    ):
        super().__init__()
        self.conv1 = self.add_module("conv1", Conv2d(in_channels, width, 1, rng))
        self.conv2 = self.add_module("conv2", Conv2d(width, width, 3, rng, stride=stride))
        self.conv3 = self.add_module(
            "conv3", Conv2d(width, 4 * width, 1, rng, zero_init=zero_last)
        )
        self.shortcut: Optional[Conv2d] = None
        if stride != 1 or in_channels != 4 * width:
            self.shortcut = self.add_module(
                "shortcut", Conv2d(in_channels, 4 * width, 1, rng, stride=stride, pad=0)
            )

    def forward_with_taps(self, x: Tensor) -> Taps:
        x0 = x if self.shortcut is None else self.shortcut(x)
        x2 = relu(self.conv2(relu(self.conv1(x))))
        x3 = self.conv3(x2)
        return Taps(x0=x0, x2=x2, x3=x3, X=relu(add(x3, x0)))

    def forward(self, x: Tensor) -> Tensor:
        return self.forward_with_taps(x).X


class HostModel(Module):
    """Small ResNet-style classifier; the last bottleneck block exposes taps."""

    def __init__(self, config: HostConfig):
        super().__init__()
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed)
        widths = config.stage_widths
        stem_width = widths[0] if widths else config.bottleneck_width
        self.stem = self.add_module("stem", Conv2d(config.input_channels, stem_width, 3, rng))
        self.stages: List[BasicBlock] = []
        in_channels = stem_width
        for i, width in enumerate(widths):
            self.stages.append(self.add_module(f"stage{i + 1}", BasicBlock(in_channels, width, rng)))
            in_channels = width
        n = config.bottleneck_width
        self.transition = self.add_module("transition", Bottleneck(in_channels, n, rng, stride=2))
        self.last_block = self.add_module("last_block", Bottleneck(4 * n, n, rng))
        self.fc = self.add_module("fc", Linear(4 * n, config.class_count, rng))

    def _check_batch(self, batch: Tensor, any_size: bool):
        if batch.ndim != 4 or batch.shape[1] != self.config.input_channels:
            raise ShapeError(
                f"expected (B, {self.config.input_channels}, H, W) input, got {batch.shape}"
            )
        if not any_size and tuple(batch.shape[2:]) != tuple(self.config.input_hw):
            raise ShapeError(f"expected spatial size {self.config.input_hw}, got {batch.shape[2:]}")

    def forward_with_taps(
        self, batch: Union[Tensor, np.ndarray], any_size: bool = False
    ) -> Tuple[Tensor, Taps]:
        batch = batch if isinstance(batch, Tensor) else Tensor(batch)
        self._check_batch(batch, any_size)
        x = relu(self.stem(batch))
        for stage in self.stages:
            x = stage(x)
        x = self.transition(x)
        taps = self.last_block.forward_with_taps(x)
        return self.head(taps.X), taps

    def head(self, features: Tensor) -> Tensor:
        return self.fc(global_avg_pool(features))

    def forward(self, batch: Union[Tensor, np.ndarray]) -> Tensor:
        return self.forward_with_taps(batch)[0]


class FrozenHost:
    """Read-only handle on a host whose parameters can never train again."""

    def __init__(self, model: HostModel):
        for param in model.parameters():
            param.freeze()
        self._model = model

    @property
    def config(self) -> HostConfig:
        return self._model.config

    def forward_with_taps(
        self, batch: Union[Tensor, np.ndarray], any_size: bool = False
    ) -> Tuple[Tensor, Taps]:
        with no_grad():
            return self._model.forward_with_taps(batch, any_size=any_size)

    def head(self, features: Tensor) -> Tensor:
        # gradients may flow into ``features``; host parameters are frozen
        return self._model.head(features)

    def predict(self, batch: Union[Tensor, np.ndarray]) -> np.ndarray:
        return self.forward_with_taps(batch)[0].data

    def surrogate_weights(self) -> Tuple[np.ndarray, np.ndarray]:
        """Copies of the last block's Conv3 kernel and bias."""
        conv3 = self._model.last_block.conv3
        assert conv3.bias is not None
        return conv3.weight.data.copy(), conv3.bias.data.copy()

    def named_parameters(self):
        return self._model.named_parameters()

    def state_dict(self) -> NamedTensors:
        return self._model.state_dict()

    def checksum(self) -> str:
        return self._model.checksum()

    def gradient_buffers(self) -> Dict[str, Optional[np.ndarray]]:
        return {name: p.grad for name, p in self._model.named_parameters()}


class Xlayer(Module):
    """Extra trainable bottleneck between the frozen block output and the frozen head."""

    def __init__(self, config: HostConfig, seed: int = 0):
        super().__init__()
        n = config.bottleneck_width
        # zero-initialized last conv: the block starts as relu(X) == X
        self.block = self.add_module(
            "block", Bottleneck(4 * n, n, np.random.default_rng(seed), zero_last=True)
        )

    def forward(self, features: Tensor) -> Tensor:
        return self.block(features)

    def logits(self, host: FrozenHost, batch: Union[Tensor, np.ndarray], any_size: bool = False) -> Tensor:
        _, taps = host.forward_with_taps(batch, any_size=any_size)
        return host.head(self(taps.X))


def build_host(config: Optional[HostConfig] = None) -> HostModel:
    return HostModel(config or HostConfig())


def freeze(model: HostModel) -> FrozenHost:
    return FrozenHost(model)
