from __future__ import annotations

__all__ = [
    "Tensor",
    "Graph",
    "no_grad",
    "double_precision",
    "get_default_dtype",
    "is_grad_enabled",
    "relu",
    "sigmoid",
    "add",
    "concat_channels",
    "stack",
    "global_avg_pool",
    "fully_connected",
    "softmax",
    "cross_entropy",
    "softmax_weighted_sum",
    "conv2d",
    "transposed_conv2d",
    "bilinear_resize",
    "bilinear_matrix",
    "rot90_spatial",
]

import threading
from contextlib import contextmanager
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import FrozenParameterError, NonFiniteError, ShapeError
from .types import HW, ArrayLike


_state = threading.local()

BackwardFn = Callable[[np.ndarray], None]


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def get_default_dtype():
    return getattr(_state, "dtype", np.float32)


@contextmanager
def no_grad():
    """Ops inside the block record no graph (per thread)."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


@contextmanager
def double_precision():
    """New tensors are stored as float64 inside the block (verification mode)."""
    previous = get_default_dtype()
    _state.dtype = np.float64
    try:
        yield
    finally:
        _state.dtype = previous


def _check_finite(arr: np.ndarray, op: str):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by {op}")


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _accumulate(t: Tensor, g: np.ndarray):
    # frozen and constant tensors never receive gradients
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.data.dtype)
    if g.shape != t.data.shape:
        g = _unbroadcast(g, t.data.shape)
    _check_finite(g, f"backward of {t.op or 'leaf'}")
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


def _as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward: BackwardFn,
    op: str,
) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out._requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


class Tensor:
    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        name: Optional[str] = None,
    ):
        self.data: np.ndarray = np.asarray(data, dtype=get_default_dtype())
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.op = ""
        self.frozen = False
        self._requires_grad = bool(requires_grad)
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None

    def __hash__(self):
        return id(self)

    def __repr__(self) -> str:
        listed = [f"shape={self.shape}"]
        if self.name:
            listed.insert(0, f"name={self.name!r}")
        if self.requires_grad:
            listed.append("requires_grad=True")
        if self.frozen:
            listed.append("frozen=True")
        return f"Tensor({', '.join(listed)})"

    @property
    def requires_grad(self) -> bool:
        return self._requires_grad

    @requires_grad.setter
    def requires_grad(self, value: bool):
        if value and self.frozen:
            raise FrozenParameterError(
                f"tensor {self.name or id(self)} is frozen and cannot require grad"
            )
        self._requires_grad = bool(value)

    def freeze(self):
        self.frozen = True
        self._requires_grad = False
        self.grad = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad: Optional[np.ndarray] = None):
        if not self.requires_grad:
            raise RuntimeError("backward() called on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("grad must be given for non-scalar outputs")
            grad = np.ones_like(self.data)
        graph = Graph.trace(self)
        _accumulate(self, grad)
        for node in reversed(graph.nodes):
            if node._backward is None or node.grad is None:
                continue
            node._backward(node.grad)
            # interior gradients are transient
            node.grad = None

    # arithmetic

    def __add__(self, other) -> Tensor:
        return add(self, other)

    __radd__ = __add__

    def __neg__(self) -> Tensor:
        def backward(g):
            _accumulate(self, -g)

        return _make(-self.data, (self,), backward, "neg")

    def __sub__(self, other) -> Tensor:
        return add(self, -_as_tensor(other))

    def __rsub__(self, other) -> Tensor:
        return add(_as_tensor(other), -self)

    def __mul__(self, other) -> Tensor:
        other = _as_tensor(other)

        def backward(g):
            _accumulate(self, g * other.data)
            _accumulate(other, g * self.data)

        return _make(self.data * other.data, (self, other), backward, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other) -> Tensor:
        other = _as_tensor(other)
        return self * other**-1.0

    def __pow__(self, exponent: float) -> Tensor:
        if not isinstance(exponent, (int, float)):
            raise TypeError("only scalar exponents are supported")

        def backward(g):
            _accumulate(self, g * exponent * self.data ** (exponent - 1))

        return _make(self.data**exponent, (self,), backward, f"pow{exponent}")

    def abs(self) -> Tensor:
        def backward(g):
            _accumulate(self, g * np.sign(self.data))

        return _make(np.abs(self.data), (self,), backward, "abs")

    def exp(self) -> Tensor:
        out_data = np.exp(self.data)

        def backward(g):
            _accumulate(self, g * out_data)

        return _make(out_data, (self,), backward, "exp")

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        shape = self.data.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accumulate(self, np.broadcast_to(g, shape))

        return _make(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        count = self.data.size if axis is None else np.prod(
            [self.data.shape[a] for a in np.atleast_1d(axis)]
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        original = self.data.shape

        def backward(g):
            _accumulate(self, g.reshape(original))

        return _make(self.data.reshape(shape), (self,), backward, "reshape")

    def __getitem__(self, idx) -> Tensor:
        # basic indexing only (slices, ints); views are copied so outputs never alias
        original = self.data.shape
        dtype = self.data.dtype

        def backward(g):
            full = np.zeros(original, dtype=dtype)
            full[idx] = g
            _accumulate(self, full)

        return _make(np.array(self.data[idx]), (self,), backward, "getitem")


class Graph:
    """Operations reachable from a root tensor, in topological order."""

    def __init__(self, nodes: List[Tensor]):
        self.nodes = nodes

    @classmethod
    def trace(cls, root: Tensor) -> Graph:
        order: List[Tensor] = []
        visited = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)

    @property
    def leaves(self) -> List[Tensor]:
        return [n for n in self.nodes if n._backward is None and n.requires_grad]

    def __len__(self) -> int:
        return len(self.nodes)


# core ops


def add(a: Union[Tensor, ArrayLike], b: Union[Tensor, ArrayLike]) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _make(a.data + b.data, (a, b), backward, "add")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        _accumulate(x, g * mask)

    return _make(np.where(mask, x.data, 0), (x,), backward, "relu")


def sigmoid(x: Tensor) -> Tensor:
    out_data = np.where(
        x.data >= 0,
        1.0 / (1.0 + np.exp(-np.abs(x.data))),
        np.exp(-np.abs(x.data)) / (1.0 + np.exp(-np.abs(x.data))),
    )

    def backward(g):
        _accumulate(x, g * out_data * (1.0 - out_data))

    return _make(out_data, (x,), backward, "sigmoid")


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    if len(tensors) == 0:
        raise ShapeError("concat_channels needs at least one tensor")
    first = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(first) or t.shape[0] != first[0] or t.shape[2:] != first[2:]:
            raise ShapeError(f"cannot concatenate {t.shape} with {first} along channels")
    widths = [t.shape[1] for t in tensors]
    offsets = np.cumsum([0] + widths)

    def backward(g):
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            _accumulate(t, g[:, start:stop])

    data = np.concatenate([t.data for t in tensors], axis=1)
    return _make(data, tuple(tensors), backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if len(tensors) == 0:
        raise ShapeError("stack needs at least one tensor")
    shape = tensors[0].shape
    if any(t.shape != shape for t in tensors):
        raise ShapeError("stack needs tensors of identical shape")

    def backward(g):
        for i, t in enumerate(tensors):
            _accumulate(t, np.take(g, i, axis=axis))

    return _make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), backward, "stack")


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NCHW, got {x.shape}")
    _, _, h, w = x.shape

    def backward(g):
        _accumulate(x, np.broadcast_to(g[:, :, None, None] / (h * w), x.shape))

    return _make(x.data.mean(axis=(2, 3)), (x,), backward, "global_avg_pool")


def fully_connected(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"fully_connected: input {x.shape} vs weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        _accumulate(x, g @ weight.data)
        _accumulate(weight, g.T @ x.data)
        if bias is not None:
            _accumulate(bias, g.sum(axis=0))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward, "fully_connected")


def _softmax_array(z: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    s = _softmax_array(x.data, axis)

    def backward(g):
        _accumulate(x, s * (g - (g * s).sum(axis=axis, keepdims=True)))

    return _make(s, (x,), backward, "softmax")


def cross_entropy(logits: Tensor, labels: ArrayLike) -> Tensor:
    """Mean negative log-likelihood; log-softmax is applied internally."""
    if logits.ndim == 1:
        logits = logits.reshape(1, -1)
    batch, classes = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != batch:
        raise ShapeError(f"{labels.shape[0]} labels for a batch of {batch}")
    if np.any(labels < 0) or np.any(labels >= classes):
        raise ValueError(f"label out of range [0, {classes})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(batch)
    loss = -log_probs[rows, labels].mean()

    def backward(g):
        probs = np.exp(log_probs)
        probs[rows, labels] -= 1.0
        _accumulate(logits, g * probs / batch)

    return _make(np.asarray(loss), (logits,), backward, "cross_entropy")


def softmax_weighted_sum(stacked: Tensor, axis: int = 0) -> Tensor:
    """Per-coordinate softmax(v)ᵀ·v over ``axis``."""
    v = stacked.data
    s = _softmax_array(v, axis)
    y = (s * v).sum(axis=axis)

    def backward(g):
        ge = np.expand_dims(g, axis)
        ye = np.expand_dims(y, axis)
        _accumulate(stacked, ge * s * (1.0 + v - ye))

    return _make(y, (stacked,), backward, "softmax_weighted_sum")


# convolution plumbing


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> Tuple[np.ndarray, int, int]:
    xp = np.ascontiguousarray(xp)
    b, c, h, w = xp.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    sb, sc, sh, sw = xp.strides
    patches = np.lib.stride_tricks.as_strided(
        xp,
        shape=(b, c, kh, kw, ho, wo),
        strides=(sb, sc, sh, sw, stride * sh, stride * sw),
        writeable=False,
    )
    return patches.reshape(b, c * kh * kw, ho * wo), ho, wo


def _col2im(
    cols: np.ndarray,
    shape: Tuple[int, int, int, int],
    kh: int,
    kw: int,
    stride: int,
    ho: int,
    wo: int,
) -> np.ndarray:
    b, c, h, w = shape
    out = np.zeros(shape, dtype=cols.dtype)
    cols = cols.reshape(b, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[
                :, :, i, j
            ]
    return out


def conv2d(
    input: Tensor,
    kernel: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    pad: int = 0,
) -> Tensor:
    if input.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input and OIkhkw kernel, got {input.shape}, {kernel.shape}")
    if stride < 1 or pad < 0:
        raise ValueError(f"invalid stride={stride} or pad={pad}")
    b, c, h, w = input.shape
    o, ck, kh, kw = kernel.shape
    if c != ck:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {ck}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match {o} output channels")
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}")

    xp = np.pad(input.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else input.data
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    wmat = kernel.data.reshape(o, -1)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out = out + bias.data.reshape(1, o, 1)

    def backward(g):
        g2 = g.reshape(b, o, ho * wo)
        if kernel.requires_grad:
            _accumulate(kernel, np.einsum("bon,bkn->ok", g2, cols).reshape(kernel.shape))
        if bias is not None:
            _accumulate(bias, g2.sum(axis=(0, 2)))
        if input.requires_grad:
            gxp = _col2im(np.matmul(wmat.T, g2), xp.shape, kh, kw, stride, ho, wo)
            _accumulate(input, gxp[:, :, pad : pad + h, pad : pad + w])

    parents = (input, kernel) if bias is None else (input, kernel, bias)
    return _make(out.reshape(b, o, ho, wo), parents, backward, "conv2d")


def _fit_axis(arr: np.ndarray, axis: int, target: int) -> np.ndarray:
    """Center-crop or zero-pad ``arr`` along ``axis`` to ``target``."""
    n = arr.shape[axis]
    if n == target:
        return arr
    if n > target:
        start = (n - target) // 2
        return np.take(arr, np.arange(start, start + target), axis=axis)
    before = (target - n) // 2
    widths = [(0, 0)] * arr.ndim
    widths[axis] = (before, target - n - before)
    return np.pad(arr, widths)


def _unfit_axis(g: np.ndarray, axis: int, nominal: int) -> np.ndarray:
    target = g.shape[axis]
    if nominal == target:
        return g
    if nominal > target:
        start = (nominal - target) // 2
        widths = [(0, 0)] * g.ndim
        widths[axis] = (start, nominal - target - start)
        return np.pad(g, widths)
    before = (target - nominal) // 2
    return np.take(g, np.arange(before, before + nominal), axis=axis)


def transposed_conv2d(
    input: Tensor,
    kernel: Tensor,
    stride: int,
    target_hw: HW,
) -> Tensor:
    """Transposed convolution whose nominal output is center-cropped or
    zero-padded to exactly ``target_hw``. Kernel layout is (in, out, kh, kw)."""
    if input.ndim != 4 or kernel.ndim != 4:
        raise ShapeError("transposed_conv2d expects NCHW input and (in, out, kh, kw) kernel")
    if stride < 1:
        raise ValueError(f"invalid stride={stride}")
    b, c, h, w = input.shape
    ci, co, kh, kw = kernel.shape
    if c != ci:
        raise ShapeError(f"transposed_conv2d: input has {c} channels, kernel expects {ci}")
    hn = (h - 1) * stride + kh
    wn = (w - 1) * stride + kw
    th, tw = target_hw
    if abs(th - hn) > kh or abs(tw - wn) > kw:
        raise ShapeError(
            f"target {th}x{tw} unreachable from nominal {hn}x{wn} with a {kh}x{kw} kernel"
        )

    wmat = kernel.data.reshape(ci, co * kh * kw)
    x_flat = input.data.reshape(b, ci, h * w)
    cols = np.matmul(wmat.T, x_flat)
    nominal = _col2im(cols, (b, co, hn, wn), kh, kw, stride, h, w)
    out = _fit_axis(_fit_axis(nominal, 2, th), 3, tw)

    def backward(g):
        gn = _unfit_axis(_unfit_axis(g, 2, hn), 3, wn)
        gcols, _, _ = _im2col(gn, kh, kw, stride)
        if kernel.requires_grad:
            _accumulate(kernel, np.einsum("bcn,bkn->ck", x_flat, gcols).reshape(kernel.shape))
        if input.requires_grad:
            _accumulate(input, np.matmul(wmat, gcols).reshape(input.shape))

    return _make(out, (input, kernel), backward, "transposed_conv2d")


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) interpolation weights, align-corners-false."""
    if n_in < 1 or n_out < 1:
        raise ShapeError(f"invalid resize extents {n_in} -> {n_out}")
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    rows = np.arange(n_out)
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    np.add.at(mat, (rows, lo), 1.0 - frac)
    np.add.at(mat, (rows, hi), frac)
    return mat


def bilinear_resize(input: Tensor, target_hw: HW) -> Tensor:
    if input.ndim != 4:
        raise ShapeError(f"bilinear_resize expects NCHW, got {input.shape}")
    _, _, h, w = input.shape
    th, tw = target_hw
    rh = bilinear_matrix(h, th).astype(input.dtype)
    rw = bilinear_matrix(w, tw).astype(input.dtype)
    out = np.matmul(np.matmul(rh, input.data), rw.T)

    def backward(g):
        _accumulate(input, np.matmul(np.matmul(rh.T, g), rw))

    return _make(out, (input,), backward, "bilinear_resize")


def rot90_spatial(x: Tensor, k: int) -> Tensor:
    """Rotate the spatial grid by k·90° counter-clockwise (k may be negative)."""
    if x.ndim != 4:
        raise ShapeError(f"rot90_spatial expects NCHW, got {x.shape}")
    if k % 2 and x.shape[2] != x.shape[3]:
        raise ShapeError(f"quarter rotation needs square maps, got {x.shape[2]}x{x.shape[3]}")

    def backward(g):
        _accumulate(x, np.rot90(g, -k, axes=(2, 3)))

    out = np.ascontiguousarray(np.rot90(x.data, k, axes=(2, 3)))
    return _make(out, (x,), backward, f"rot90x{k % 4}")
