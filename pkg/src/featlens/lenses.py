from __future__ import annotations

__all__ = [
    "LensInit",
    "LensConfig",
    "RotationLens",
    "ScalingLens",
    "RotationClassifier",
    "LensRegistry",
    "multigroup_conv",
    "self_attentive_sum",
    "rotation_lens_forward",
    "scaling_lens_forward",
    "content_taps",
    "predict_rotation",
    "build_lens",
    "apply_lens_pipeline",
]

import logging
from dataclasses import asdict, dataclass, fields
from enum import auto
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from ._constants import ROTATION_BINS, SCALING_BINS
from ._str_enum import AutoStrEnum
from .errors import ShapeError, UnresolvedBinError
from .host import FrozenHost, Taps
from .nn import Module
from .tensor import (
    Tensor,
    concat_channels,
    conv2d,
    global_avg_pool,
    fully_connected,
    no_grad,
    sigmoid,
    softmax,
    softmax_weighted_sum,
    stack,
    transposed_conv2d,
    bilinear_resize,
)
from .transforms import CanvasPolicy, TransformSpec, content_feature_box, dual_rotate_features
from .types import HW, NamedTensors


module_logger = logging.getLogger(__name__)
module_logger.addHandler(logging.NullHandler())


class LensInit(AutoStrEnum):
    # every group starts as a copy of the host's Conv3 plus the identity shortcut
    HOST = auto()
    RANDOM = auto()


@dataclass
class LensConfig:
    # M: number of groups of the multigroup convolution
    groups: int = 4
    kernel_size: int = 1
    init: LensInit = LensInit.HOST
    init_noise: float = 0.01
    # transposed-conv kernel of the scaling lens; None means equal to its stride
    upsample_kernel: Optional[int] = None
    canvas_policy: CanvasPolicy = CanvasPolicy.PAD
    seed: int = 0

    def __setattr__(self, name: str, value: object):
        if name == "init":
            value = LensInit.parse(value)
        elif name == "canvas_policy":
            value = CanvasPolicy.parse(value)
        elif name == "groups" and int(value) < 1:  # type: ignore
            raise ValueError(f"groups must be >= 1, got {value}")
        elif name == "kernel_size" and value not in (1, 3):
            raise ValueError(f"kernel_size must be 1 or 3, got {value}")
        super().__setattr__(name, value)

    @classmethod
    def from_dict(cls, obj: Mapping) -> LensConfig:
        return cls(**{f.name: obj[f.name] for f in fields(cls) if f.name in obj})

    def to_dict(self) -> dict:
        obj = asdict(self)
        obj["init"] = str(self.init)
        obj["canvas_policy"] = str(self.canvas_policy)
        return obj


def multigroup_conv(
    cat: Tensor,
    weight: Tensor,
    bias: Optional[Tensor],
    groups: int,
) -> List[Tensor]:
    """One convolution whose output channels are split into ``groups`` groups."""
    if groups < 1:
        raise ValueError(f"groups must be >= 1, got {groups}")
    if cat.ndim != 4 or cat.shape[1] != weight.shape[1]:
        raise ShapeError(f"multigroup_conv: input {cat.shape} vs kernel {weight.shape}")
    if weight.shape[0] % groups:
        raise ShapeError(f"{weight.shape[0]} output channels do not split into {groups} groups")
    width = weight.shape[0] // groups
    out = conv2d(cat, weight, bias, stride=1, pad=weight.shape[2] // 2)
    if groups == 1:
        return [out]
    return [out[:, m * width : (m + 1) * width] for m in range(groups)]


def self_attentive_sum(groups: Sequence[Tensor]) -> Tensor:
    """Per coordinate: softmax(v)ᵀ·v over the groups, a soft max-pool."""
    if len(groups) == 0:
        raise ShapeError("self_attentive_sum needs at least one group")
    return softmax_weighted_sum(stack(groups, axis=0), axis=0)


class _MultigroupLens(Module):
    """[x2, x0] -> optional dual rotation -> multigroup conv -> attentive sum."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        config: LensConfig,
        rng: np.random.Generator,
        surrogate: Optional[Tuple[np.ndarray, np.ndarray]] = None,
    ):
        super().__init__()
        self.groups = config.groups
        k = config.kernel_size
        shape = (config.groups * out_channels, in_channels, k, k)
        if config.init == LensInit.HOST and surrogate is not None:
            weight, bias = self._surrogate_init(shape, out_channels, surrogate)
            weight += rng.normal(0.0, config.init_noise, size=shape)
        else:
            weight = rng.normal(0.0, np.sqrt(1.0 / (in_channels * k * k)), size=shape)
            bias = np.zeros(shape[0])
        self.weight = self.add_parameter("weight", weight)
        self.bias = self.add_parameter("bias", bias)

    def _surrogate_init(self, shape, out_channels, surrogate):
        conv3_weight, conv3_bias = surrogate
        mid = conv3_weight.shape[1]
        if shape[1] != mid + out_channels:
            raise ShapeError(f"lens input width {shape[1]} != {mid} + {out_channels}")
        center = shape[2] // 2
        block = np.zeros((out_channels, shape[1]))
        block[:, :mid] = conv3_weight[:, :, 0, 0]
        block[:, mid:] = np.eye(out_channels)
        weight = np.zeros(shape)
        weight[:, :, center, center] = np.tile(block, (self.groups, 1))
        return weight, np.tile(conv3_bias, self.groups)

    def forward(self, cat: Tensor) -> Tensor:
        return self_attentive_sum(multigroup_conv(cat, self.weight, self.bias, self.groups))


class RotationLens(Module):
    def __init__(
        self,
        angle_deg: float,
        in_channels: int,
        out_channels: int,
        config: Optional[LensConfig] = None,
        rng: Optional[np.random.Generator] = None,
        surrogate: Optional[Tuple[np.ndarray, np.ndarray]] = None,
    ):
        super().__init__()
        config = config or LensConfig()
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        self.angle_deg = float(angle_deg) % 360.0
        if self.angle_deg not in (90.0, 180.0, 270.0):
            raise ValueError(f"rotation lenses cover 90, 180 or 270 degrees, got {angle_deg}")
        self.mg = self.add_module(
            "mg", _MultigroupLens(in_channels, out_channels, config, rng, surrogate)
        )

    def forward(self, taps: Taps) -> Tensor:
        cat = dual_rotate_features(concat_channels([taps.x2, taps.x0]), self.angle_deg)
        return self.mg(cat)


def rotation_lens_forward(taps: Taps, spec: TransformSpec, lens: RotationLens) -> Tensor:
    lens_bin = spec.lens_bin
    if lens_bin not in ROTATION_BINS[1:]:
        raise UnresolvedBinError(f"{spec} does not bin to a rotation lens")
    if float(ROTATION_BINS.index(lens_bin) * 90) != lens.angle_deg:
        raise UnresolvedBinError(f"{spec} bins to {lens_bin}, lens covers rot{lens.angle_deg:g}")
    return lens(taps)


class ScalingLens(Module):
    """Y = w1 · TransConv(Λ1([x2, x0])) + w2 · bilinear(x3), w1 = logistic(alpha)."""

    def __init__(
        self,
        scale: float,
        in_channels: int,
        out_channels: int,
        config: Optional[LensConfig] = None,
        rng: Optional[np.random.Generator] = None,
        surrogate: Optional[Tuple[np.ndarray, np.ndarray]] = None,
    ):
        super().__init__()
        config = config or LensConfig()
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        if not 0 < scale < 1:
            raise ValueError(f"scaling lenses cover downscalings only, got scale {scale}")
        self.scale = scale
        self.stride = max(1, round(1.0 / scale))
        self.canvas_policy = config.canvas_policy
        k = config.upsample_kernel or self.stride
        self.embedded = self.add_module(
            "embedded", _MultigroupLens(in_channels, out_channels, config, rng, surrogate)
        )
        # nearest-neighbour upsampling when k == stride
        kernel = np.zeros((out_channels, out_channels, k, k))
        kernel[np.arange(out_channels), np.arange(out_channels)] = 1.0 if k == self.stride else 1.0 / k
        self.upsample = self.add_parameter("upsample", kernel)
        self.alpha = self.add_parameter("alpha", np.zeros(()))

    @property
    def mixing_weights(self) -> Tuple[float, float]:
        w1 = float(1.0 / (1.0 + np.exp(-float(self.alpha.data))))
        return w1, 1.0 - w1

    def forward(self, taps: Taps, target_hw: HW) -> Tensor:
        src_hw = taps.feature_hw
        if target_hw[0] < src_hw[0] or target_hw[1] < src_hw[1]:
            raise ShapeError(f"target {target_hw} smaller than scaled features {src_hw}")
        x1 = self.embedded(concat_channels([taps.x2, taps.x0]))
        x2_up = transposed_conv2d(x1, self.upsample, self.stride, target_hw)
        w1 = sigmoid(self.alpha)
        return w1 * x2_up + (1.0 - w1) * bilinear_resize(taps.x3, target_hw)


def scaling_lens_forward(taps_scaled: Taps, target_hw: HW, lens: ScalingLens) -> Tensor:
    return lens(taps_scaled, target_hw)


def content_taps(taps: Taps, scale: float, policy: CanvasPolicy) -> Taps:
    """Taps restricted to the feature cells that see the scaled content."""
    if policy == CanvasPolicy.RESIZE:
        return taps
    return taps.crop(content_feature_box(taps.feature_hw, scale))


class RotationClassifier(Module):
    """4-way rotation head: FC over globally pooled [x2, x0]."""

    def __init__(self, in_channels: int, zero_init: bool = True, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        shape = (len(ROTATION_BINS), in_channels)
        weight = np.zeros(shape) if zero_init else rng.normal(0.0, np.sqrt(1.0 / in_channels), shape)
        self.weight = self.add_parameter("weight", weight)
        self.bias = self.add_parameter("bias", np.zeros(len(ROTATION_BINS)))

    def forward(self, taps: Taps) -> Tensor:
        pooled = global_avg_pool(concat_channels([taps.x2, taps.x0]))
        return fully_connected(pooled, self.weight, self.bias)


def predict_rotation(taps: Taps, classifier: RotationClassifier) -> Tuple[List[str], np.ndarray]:
    """Predicted bins (argmax) and the (B, 4) class probabilities."""
    with no_grad():
        probs = softmax(classifier(taps), axis=-1).data
    return [ROTATION_BINS[i] for i in probs.argmax(axis=1)], probs


LensType = Union[RotationLens, ScalingLens]


class LensRegistry:
    """Lens bin -> trained lens; the identity bin always passes X through."""

    def __init__(self, lenses: Optional[Mapping[str, LensType]] = None):
        self._lenses: Dict[str, LensType] = {}
        for lens_bin, lens in (lenses or {}).items():
            self.register(lens_bin, lens)

    def register(self, lens_bin: str, lens: LensType):
        if lens_bin == "identity":
            raise ValueError("the identity bin is built in and cannot be replaced")
        if lens_bin not in ROTATION_BINS + SCALING_BINS:
            raise ValueError(f"unsupported lens bin: {lens_bin}")
        self._lenses[lens_bin] = lens

    def resolve(self, lens_bin: str) -> Optional[LensType]:
        """The lens of ``lens_bin``; None stands for identity pass-through."""
        if lens_bin == "identity":
            return None
        if lens_bin not in self._lenses:
            raise UnresolvedBinError(f"no lens registered for bin {lens_bin!r}")
        return self._lenses[lens_bin]

    def __contains__(self, lens_bin: str) -> bool:
        return lens_bin == "identity" or lens_bin in self._lenses

    def __iter__(self) -> Iterator[str]:
        return iter(self._lenses)

    def __len__(self) -> int:
        return len(self._lenses)

    @property
    def bins(self) -> List[str]:
        return ["identity"] + list(self._lenses)

    def state_dict(self) -> NamedTensors:
        state = {}
        for lens_bin, lens in self._lenses.items():
            for name, value in lens.state_dict().items():
                state[f"{lens_bin}.{name}"] = value
        return state

    @classmethod
    def from_state(
        cls,
        state: Mapping[str, np.ndarray],
        host: FrozenHost,
        config: Optional[LensConfig] = None,
    ) -> LensRegistry:
        registry = cls()
        for lens_bin in sorted({name.split(".", 1)[0] for name in state}):
            lens = build_lens(lens_bin, host, config)
            prefix = lens_bin + "."
            lens.load_state_dict(
                {k[len(prefix) :]: v for k, v in state.items() if k.startswith(prefix)}
            )
            registry.register(lens_bin, lens)
        return registry


def build_lens(
    lens_bin: str, host: FrozenHost, config: Optional[LensConfig] = None
) -> LensType:
    config = config or LensConfig()
    n = host.config.bottleneck_width
    # lens input is [x2, x0]: N + 4N channels
    surrogate = host.surrogate_weights() if config.init == LensInit.HOST else None
    spec = TransformSpec.parse(lens_bin)
    rng = np.random.default_rng(config.seed)
    if lens_bin in ROTATION_BINS[1:]:
        return RotationLens(spec.angle_deg, 5 * n, 4 * n, config, rng, surrogate)
    if lens_bin in SCALING_BINS:
        return ScalingLens(spec.scale, 5 * n, 4 * n, config, rng, surrogate)
    raise UnresolvedBinError(f"no lens type for bin {lens_bin!r}")


def apply_lens_pipeline(
    host: FrozenHost,
    registry: LensRegistry,
    batch: np.ndarray,
    bins: Union[str, Sequence[str], None] = None,
    classifier: Optional[RotationClassifier] = None,
) -> np.ndarray:
    """Logits of the frozen head fed with lens outputs in place of X.

    ``bins`` is one bin for the whole batch or one per image; None means the
    rotation classifier picks the bin of every image.
    """
    any_size = batch.shape[2:] != tuple(host.config.input_hw)
    logits, taps = host.forward_with_taps(batch, any_size=any_size)
    n_images = batch.shape[0]
    if bins is None:
        if classifier is None:
            raise ValueError("predicted selection needs a rotation classifier")
        bins, _ = predict_rotation(taps, classifier)
    elif isinstance(bins, str):
        bins = [bins] * n_images
    if len(bins) != n_images:
        raise ShapeError(f"{len(bins)} bins for {n_images} images")

    out = logits.data.copy()
    with no_grad():
        for lens_bin in sorted(set(bins)):
            lens = registry.resolve(lens_bin)
            if lens is None:
                continue
            idx = [i for i, b in enumerate(bins) if b == lens_bin]
            sub = Taps(*(Tensor(getattr(taps, name).data[idx]) for name in ("x0", "x2", "x3", "X")))
            if isinstance(lens, ScalingLens):
                y = lens(content_taps(sub, lens.scale, lens.canvas_policy), host.config.feature_hw)
            else:
                y = lens(sub)
            out[idx] = host.head(y).data
    return out
