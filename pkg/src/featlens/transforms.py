from __future__ import annotations

__all__ = [
    "TransformKind",
    "CanvasPolicy",
    "TransformSpec",
    "bin_angle",
    "bin_to_spec",
    "apply_transform",
    "rotate_image",
    "scale_image",
    "resize_image",
    "dual_rotate_features",
    "forward_rotate_features",
    "content_feature_box",
    "crop_features",
]

import math
from dataclasses import dataclass
from enum import auto
from typing import Tuple

import numpy as np

from ._constants import ROTATION_BINS
from ._str_enum import AutoStrEnum
from .errors import ShapeError
from .tensor import Tensor, bilinear_matrix, rot90_spatial
from .types import HW


class TransformKind(AutoStrEnum):
    IDENTITY = auto()
    ROTATION = auto()
    SCALING = auto()


class CanvasPolicy(AutoStrEnum):
    # downscaled content is zero-padded back to the full input size, centered
    PAD = auto()
    # downscaled content is fed at its reduced resolution
    RESIZE = auto()


@dataclass(frozen=True)
class TransformSpec:
    kind: TransformKind = TransformKind.IDENTITY
    angle_deg: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", TransformKind.parse(self.kind))
        if self.kind == TransformKind.ROTATION:
            object.__setattr__(self, "angle_deg", float(self.angle_deg) % 360.0)
        elif self.kind == TransformKind.SCALING:
            if not self.scale > 0:
                raise ValueError(f"scale must be positive, got {self.scale}")
        else:
            object.__setattr__(self, "angle_deg", 0.0)
            object.__setattr__(self, "scale", 1.0)

    @classmethod
    def identity(cls) -> TransformSpec:
        return cls()

    @classmethod
    def rotation(cls, angle_deg: float) -> TransformSpec:
        return cls(TransformKind.ROTATION, angle_deg=angle_deg)

    @classmethod
    def scaling(cls, scale: float) -> TransformSpec:
        return cls(TransformKind.SCALING, scale=scale)

    @classmethod
    def parse(cls, name: str) -> TransformSpec:
        """``identity``, ``rot<deg>`` or ``scale<n>`` (scale 1/n)."""
        name = name.strip().lower()
        if name in ("identity", "none"):
            return cls.identity()
        if name.startswith("rot"):
            return cls.rotation(float(name[3:]))
        if name.startswith("scale"):
            return cls.scaling(1.0 / float(name[5:]))
        raise ValueError(f"unsupported transform: {name!r}")

    def dual(self) -> TransformSpec:
        if self.kind == TransformKind.ROTATION:
            return TransformSpec.rotation(-self.angle_deg)
        if self.kind == TransformKind.SCALING:
            return TransformSpec.scaling(1.0 / self.scale)
        return self

    @property
    def is_identity(self) -> bool:
        if self.kind == TransformKind.ROTATION:
            return self.angle_deg == 0.0
        if self.kind == TransformKind.SCALING:
            return self.scale == 1.0
        return True

    @property
    def quarter_turns(self) -> int:
        """Number of exact 90° counter-clockwise turns, or -1 if not a multiple."""
        if self.kind != TransformKind.ROTATION:
            return 0
        if self.angle_deg % 90.0:
            return -1
        return int(self.angle_deg // 90.0) % 4

    @property
    def lens_bin(self) -> str:
        if self.kind == TransformKind.ROTATION:
            return bin_angle(self.angle_deg)
        if self.kind == TransformKind.SCALING and self.scale < 1.0:
            return f"scale{round(1.0 / self.scale)}"
        return "identity"

    def __str__(self) -> str:
        if self.kind == TransformKind.ROTATION:
            return f"rot{self.angle_deg:g}"
        if self.kind == TransformKind.SCALING:
            return f"scale{1.0 / self.scale:g}"
        return "identity"


def bin_angle(angle_deg: float) -> str:
    """[-45,45) -> identity, [45,135) -> rot90, [135,225) -> rot180, [225,315) -> rot270."""
    reduced = (float(angle_deg) + 45.0) % 360.0
    return ROTATION_BINS[int(reduced // 90.0) % 4]


def bin_to_spec(lens_bin: str) -> TransformSpec:
    return TransformSpec.parse(lens_bin)


def resize_image(image: np.ndarray, target_hw: HW) -> np.ndarray:
    """Bilinear (align-corners-false) resize of an (H, W) float image."""
    h, w = image.shape
    if (h, w) == tuple(target_hw):
        return image
    rh = bilinear_matrix(h, target_hw[0])
    rw = bilinear_matrix(w, target_hw[1])
    return rh @ image.astype(np.float64) @ rw.T


def _center_fit(image: np.ndarray, canvas_hw: HW) -> np.ndarray:
    out = np.zeros(canvas_hw, dtype=image.dtype)
    h, w = image.shape
    ch, cw = canvas_hw
    # source and destination offsets for crop (negative) or pad (positive)
    dy, dx = (ch - h) // 2, (cw - w) // 2
    sy0, dy0 = max(0, -dy), max(0, dy)
    sx0, dx0 = max(0, -dx), max(0, dx)
    hh, ww = min(h, ch), min(w, cw)
    out[dy0 : dy0 + hh, dx0 : dx0 + ww] = image[sy0 : sy0 + hh, sx0 : sx0 + ww]
    return out


def rotate_image(image: np.ndarray, angle_deg: float) -> np.ndarray:
    """Counter-clockwise rotation about the center within the same canvas.

    Multiples of 90° are exact pixel permutations; other angles are
    bilinearly resampled with zero fill.
    """
    angle_deg = float(angle_deg) % 360.0
    if angle_deg % 90.0 == 0:
        return np.ascontiguousarray(np.rot90(image, int(angle_deg // 90)))
    h, w = image.shape
    theta = math.radians(angle_deg)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    dy, dx = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    src_r = cy + dx * math.sin(theta) + dy * math.cos(theta)
    src_c = cx + dx * math.cos(theta) - dy * math.sin(theta)
    r0 = np.floor(src_r).astype(np.int64)
    c0 = np.floor(src_c).astype(np.int64)
    fr, fc = src_r - r0, src_c - c0
    src = image.astype(np.float64)
    out = np.zeros((h, w), dtype=np.float64)
    for rr, cc, weight in (
        (r0, c0, (1 - fr) * (1 - fc)),
        (r0, c0 + 1, (1 - fr) * fc),
        (r0 + 1, c0, fr * (1 - fc)),
        (r0 + 1, c0 + 1, fr * fc),
    ):
        valid = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
        out[valid] += weight[valid] * src[rr[valid], cc[valid]]
    return out


def scale_image(
    image: np.ndarray, scale: float, policy: CanvasPolicy = CanvasPolicy.PAD
) -> np.ndarray:
    h, w = image.shape
    content_hw = (max(1, round(h * scale)), max(1, round(w * scale)))
    content = resize_image(image.astype(np.float64), content_hw)
    if policy == CanvasPolicy.RESIZE:
        return content
    return _center_fit(content, (h, w))


def _restore_dtype(result: np.ndarray, dtype) -> np.ndarray:
    if np.issubdtype(dtype, np.integer):
        info = np.iinfo(dtype)
        return np.clip(np.rint(result), info.min, info.max).astype(dtype)
    return result.astype(dtype)


def apply_transform(
    image: np.ndarray,
    spec: TransformSpec,
    policy: CanvasPolicy = CanvasPolicy.PAD,
) -> np.ndarray:
    """Apply ``spec`` to a single (H, W) image, keeping its dtype."""
    if image.ndim != 2:
        raise ShapeError(f"apply_transform expects an (H, W) image, got {image.shape}")
    if spec.is_identity:
        return image
    if spec.kind == TransformKind.ROTATION:
        result = rotate_image(image, spec.angle_deg)
    else:
        result = scale_image(image, spec.scale, policy)
    return _restore_dtype(result, image.dtype)


def dual_rotate_features(features: Tensor, input_angle_deg: float) -> Tensor:
    """Rotate feature maps back by -input_angle (clockwise for a CCW input)."""
    angle = float(input_angle_deg) % 360.0
    if angle == 0.0:
        return features
    if angle not in (90.0, 180.0, 270.0):
        raise ValueError(f"dual rotation needs 90, 180 or 270 degrees, got {input_angle_deg}")
    return rot90_spatial(features, -int(angle // 90))


def forward_rotate_features(features: Tensor, input_angle_deg: float) -> Tensor:
    angle = float(input_angle_deg) % 360.0
    if angle == 0.0:
        return features
    if angle not in (90.0, 180.0, 270.0):
        raise ValueError(f"feature rotation needs 90, 180 or 270 degrees, got {input_angle_deg}")
    return rot90_spatial(features, int(angle // 90))


def content_feature_box(feature_hw: HW, scale: float) -> Tuple[int, int, int, int]:
    """(top, left, h, w) of the feature cells covering centered scaled content."""
    fh, fw = feature_hw
    h = min(fh, max(1, math.ceil(fh * scale)))
    w = min(fw, max(1, math.ceil(fw * scale)))
    return (fh - h) // 2, (fw - w) // 2, h, w


def crop_features(features: Tensor, box: Tuple[int, int, int, int]) -> Tensor:
    top, left, h, w = box
    return features[:, :, top : top + h, left : left + w]
