from __future__ import annotations

__all__ = [
    "LossMode",
    "LossConfig",
    "TopKSelection",
    "topk_locations",
    "tac_terms",
    "tac_loss",
    "mse_loss",
    "mae_loss",
    "combined_loss",
    "feature_loss",
]

from dataclasses import asdict, dataclass, fields
from enum import auto
from typing import Dict, List, Mapping, Tuple, Union

import numpy as np

from ._str_enum import AutoStrEnum
from .errors import ShapeError
from .tensor import Tensor, _accumulate, _make


class LossMode(AutoStrEnum):
    TAC = auto()
    MSE = auto()
    MAE = auto()
    MSE_TAC = auto()  # "mse+tac"
    MAE_TAC = auto()  # "mae+tac"


@dataclass
class LossConfig:
    # top-K activations per channel; 3 for 7x7 maps, 6 for larger ones
    K: int = 3
    # overshoot discount
    d1: float = 0.2
    mode: LossMode = LossMode.TAC

    def __setattr__(self, name: str, value: object):
        if name == "mode":
            value = LossMode.parse(value)
        elif name == "K":
            if int(value) < 1:  # type: ignore
                raise ValueError(f"K must be >= 1, got {value}")
            value = int(value)  # type: ignore
        elif name == "d1":
            if not 0 < float(value) <= 1:  # type: ignore
                raise ValueError(f"d1 must be in (0, 1], got {value}")
            value = float(value)  # type: ignore
        super().__setattr__(name, value)

    @classmethod
    def from_dict(cls, obj: Mapping) -> LossConfig:
        return cls(**{f.name: obj[f.name] for f in fields(cls) if f.name in obj})

    def to_dict(self) -> dict:
        obj = asdict(self)
        obj["mode"] = str(self.mode)
        return obj


@dataclass
class TopKSelection:
    pos_locs: List[Tuple[int, int]]
    neg_locs: List[Tuple[int, int]]


def _as_channels(arr: np.ndarray) -> np.ndarray:
    """View any map as (batch, channel, locations)."""
    if arr.ndim in (1, 2):
        return arr.reshape(1, 1, -1)
    if arr.ndim == 3:
        return arr.reshape(1, arr.shape[0], -1)
    if arr.ndim == 4:
        return arr.reshape(arr.shape[0], arr.shape[1], -1)
    raise ShapeError(f"unsupported feature rank {arr.ndim}")


def _check_k(k: int, locations: int):
    if k < 1 or k > locations // 2:
        raise ValueError(f"K={k} violates 1 <= K <= {locations // 2} for {locations} locations")


def _top_k(x: np.ndarray, k: int) -> np.ndarray:
    # stable sort: ties go to the lowest linear index
    return np.argsort(-x, axis=-1, kind="stable")[..., :k]


def _select(x: np.ndarray, k: int) -> Tuple[np.ndarray, np.ndarray]:
    """Disjoint top-K (highest) and bottom-K (lowest) locations per channel."""
    pos = _top_k(x, k)
    ascending = np.argsort(x, axis=-1, kind="stable")
    is_pos = np.zeros(x.shape, dtype=bool)
    np.put_along_axis(is_pos, pos, True, axis=-1)
    taken = np.take_along_axis(is_pos, ascending, axis=-1)
    order = np.argsort(taken, axis=-1, kind="stable")[..., :k]
    neg = np.take_along_axis(ascending, order, axis=-1)
    return pos, neg


def topk_locations(channel_map: Union[np.ndarray, Tensor], K: int) -> TopKSelection:
    arr = channel_map.data if isinstance(channel_map, Tensor) else np.asarray(channel_map)
    if arr.ndim != 2:
        raise ShapeError(f"topk_locations expects an (h, w) map, got {arr.shape}")
    h, w = arr.shape
    _check_k(K, h * w)
    pos, neg = _select(arr.reshape(1, 1, -1), K)
    return TopKSelection(
        pos_locs=[divmod(int(i), w) for i in pos[0, 0]],
        neg_locs=[divmod(int(i), w) for i in neg[0, 0]],
    )


def _prepare(X, Y: Tensor, cfg: LossConfig):
    x_arr = X.data if isinstance(X, Tensor) else np.asarray(X, dtype=Y.dtype)
    if x_arr.shape != Y.shape:
        raise ShapeError(f"X {x_arr.shape} and Y {Y.shape} differ")
    x = _as_channels(x_arr)
    y = _as_channels(Y.data)
    _check_k(cfg.K, x.shape[-1])
    return x, y


def _tac_parts(x: np.ndarray, y: np.ndarray, cfg: LossConfig):
    pos, neg = _select(x, cfg.K)
    ytop = _top_k(y, cfg.K)
    xp, yp = np.take_along_axis(x, pos, -1), np.take_along_axis(y, pos, -1)
    xn, yn = np.take_along_axis(x, neg, -1), np.take_along_axis(y, neg, -1)
    xt, yt = np.take_along_axis(x, ytop, -1), np.take_along_axis(y, ytop, -1)
    terms = {
        "pos_under": np.where(xp > yp, xp - yp, 0.0),
        "pos_over": np.where(xp < yp, yp - xp, 0.0),
        "neg_over": np.where(xn > yn, xn - yn, 0.0),
        "neg_under": np.where(xn < yn, yn - xn, 0.0),
        "suppress": np.where(yt > xt, yt - xt, 0.0),
    }
    # d(loss)/dy at each selected location, selection held fixed
    slopes = (
        (pos, np.where(xp > yp, -1.0, np.where(xp < yp, cfg.d1, 0.0))),
        (neg, np.where(xn < yn, 1.0, np.where(xn > yn, -cfg.d1, 0.0))),
        (ytop, np.where(yt > xt, cfg.d1, 0.0)),
    )
    return terms, slopes


def tac_terms(X, Y: Tensor, cfg: LossConfig) -> Dict[str, float]:
    """Undiscounted term sums, averaged over the batch."""
    x, y = _prepare(X, Y, cfg)
    terms, _ = _tac_parts(x, y, cfg)
    return {name: float(value.sum()) / x.shape[0] for name, value in terms.items()}


def tac_loss(X, Y: Tensor, cfg: LossConfig) -> Tensor:
    """Top-K activation contrast loss; ``X`` is a constant target.

    Per channel: undershoots at X's top-K and bottom-K count fully, overshoots
    there and Y's own top-K excess over X are discounted by d1. Channel sums
    are added up and averaged over the batch.
    """
    x, y = _prepare(X, Y, cfg)
    batch = x.shape[0]
    terms, slopes = _tac_parts(x, y, cfg)
    total = (
        terms["pos_under"].sum()
        + terms["neg_under"].sum()
        + cfg.d1 * (terms["pos_over"].sum() + terms["neg_over"].sum() + terms["suppress"].sum())
    ) / batch

    def backward(g):
        gy = np.zeros(y.shape, dtype=np.float64)
        for locs, slope in slopes:
            # locations are distinct within each list, overlaps across lists add up
            part = np.zeros(y.shape, dtype=np.float64)
            np.put_along_axis(part, locs, slope, axis=-1)
            gy += part
        _accumulate(Y, (g * gy / batch).reshape(Y.shape))

    return _make(np.asarray(total), (Y,), backward, "tac_loss")


def _as_target(X, Y: Tensor) -> Tensor:
    target = X if isinstance(X, Tensor) else Tensor(np.asarray(X, dtype=Y.dtype))
    if target.shape != Y.shape:
        raise ShapeError(f"X {target.shape} and Y {Y.shape} differ")
    return target


def mse_loss(X, Y: Tensor) -> Tensor:
    return ((Y - _as_target(X, Y)) ** 2).mean()


def mae_loss(X, Y: Tensor) -> Tensor:
    return (Y - _as_target(X, Y)).abs().mean()


def combined_loss(X, Y: Tensor, cfg: LossConfig) -> Tensor:
    if cfg.mode == LossMode.MSE_TAC:
        base = mse_loss(X, Y)
    elif cfg.mode == LossMode.MAE_TAC:
        base = mae_loss(X, Y)
    else:
        raise ValueError(f"combined_loss needs mse+tac or mae+tac, got {cfg.mode}")
    return 0.5 * base + 0.5 * tac_loss(X, Y, cfg)


def feature_loss(X, Y: Tensor, cfg: LossConfig) -> Tensor:
    if cfg.mode == LossMode.TAC:
        return tac_loss(X, Y, cfg)
    if cfg.mode == LossMode.MSE:
        return mse_loss(X, Y)
    if cfg.mode == LossMode.MAE:
        return mae_loss(X, Y)
    return combined_loss(X, Y, cfg)
