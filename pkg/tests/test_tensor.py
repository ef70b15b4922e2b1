import math

import numpy as np
import pytest

from featlens.errors import NonFiniteError, ShapeError
from featlens.gradcheck import grad_check
from featlens.host import Taps
from featlens.lenses import LensConfig, RotationLens, ScalingLens, self_attentive_sum
from featlens.tensor import (
    Graph,
    Tensor,
    bilinear_resize,
    concat_channels,
    conv2d,
    cross_entropy,
    double_precision,
    global_avg_pool,
    no_grad,
    relu,
    rot90_spatial,
    sigmoid,
    softmax,
    softmax_weighted_sum,
    stack,
    transposed_conv2d,
)


def test_conv2d_identity_and_affine():
    x = Tensor([[[[5.0]]]])
    out = conv2d(x, Tensor([[[[1.0]]]]), Tensor([0.0]))
    assert out.data.tolist() == [[[[5.0]]]]

    out = conv2d(Tensor([[[[3.0]]]]), Tensor([[[[2.0]]]]), Tensor([1.0]))
    assert out.data.tolist() == [[[[7.0]]]]


def test_conv2d_ramp():
    ramp = Tensor(np.arange(1, 10, dtype=np.float32).reshape(1, 1, 3, 3))
    out = conv2d(ramp, Tensor(np.ones((1, 1, 3, 3))), stride=1, pad=0)
    assert out.shape == (1, 1, 1, 1)
    assert out.item() == 45.0


def test_conv2d_output_size():
    x = Tensor(np.zeros((2, 3, 7, 7)))
    out = conv2d(x, Tensor(np.zeros((5, 3, 3, 3))), stride=2, pad=1)
    assert out.shape == (2, 5, 4, 4)


def test_conv2d_identity_kernel_any_tensor():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(2, 3, 5, 4)))
    kernel = np.eye(3).reshape(3, 3, 1, 1)
    out = conv2d(x, Tensor(kernel))
    np.testing.assert_array_equal(out.data, x.data)


def test_conv2d_channel_mismatch():
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.zeros((1, 2, 3, 3))), Tensor(np.zeros((1, 3, 1, 1))))


def test_transposed_conv2d():
    x = Tensor(np.random.default_rng(0).normal(size=(1, 2, 3, 3)))
    identity = Tensor(np.eye(2).reshape(2, 2, 1, 1))
    out = transposed_conv2d(x, identity, stride=1, target_hw=(3, 3))
    np.testing.assert_array_equal(out.data, x.data)

    out = transposed_conv2d(Tensor([[[[1.0]]]]), Tensor(np.ones((1, 1, 2, 2))), 2, (2, 2))
    assert out.data.tolist() == [[[[1.0, 1.0], [1.0, 1.0]]]]

    out = transposed_conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.ones((1, 3, 2, 2))), 2, (7, 7))
    assert out.shape == (1, 3, 7, 7)
    assert not out.data.any()


def test_transposed_conv2d_unreachable_target():
    with pytest.raises(ShapeError):
        transposed_conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.ones((1, 1, 2, 2))), 2, (12, 12))


def test_bilinear_resize():
    row = Tensor([[[[0.0, 2.0]]]])
    out = bilinear_resize(row, (1, 4))
    np.testing.assert_allclose(out.data[0, 0, 0], [0.0, 0.5, 1.5, 2.0])

    const = Tensor(np.full((1, 2, 3, 3), 1.5))
    np.testing.assert_allclose(bilinear_resize(const, (7, 5)).data, 1.5, rtol=1e-6)

    x = Tensor(np.random.default_rng(1).normal(size=(1, 1, 4, 4)))
    np.testing.assert_allclose(bilinear_resize(x, (4, 4)).data, x.data, rtol=1e-6)


def test_core_ops():
    assert relu(Tensor([-1.0, 2.0])).data.tolist() == [0.0, 2.0]
    np.testing.assert_allclose(softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    loss = cross_entropy(Tensor([0.0, 0.0]), [0])
    assert loss.item() == pytest.approx(math.log(2), rel=1e-6)


def test_cross_entropy_label_out_of_range():
    with pytest.raises(ValueError):
        cross_entropy(Tensor([[0.0, 1.0]]), [2])


def test_concat_then_slice():
    rng = np.random.default_rng(2)
    a = Tensor(rng.normal(size=(2, 3, 4, 4)))
    b = Tensor(rng.normal(size=(2, 5, 4, 4)))
    cat = concat_channels([a, b])
    assert cat.shape == (2, 8, 4, 4)
    np.testing.assert_array_equal(cat[:, :3].data, a.data)
    np.testing.assert_array_equal(cat[:, 3:].data, b.data)
    with pytest.raises(ShapeError):
        concat_channels([])


def test_rot90_spatial_counter_clockwise():
    a, b, c, d = 1.0, 2.0, 3.0, 4.0
    x = Tensor([[[[a, b], [c, d]]]])
    assert rot90_spatial(x, 1).data[0, 0].tolist() == [[b, d], [a, c]]
    with pytest.raises(ShapeError):
        rot90_spatial(Tensor(np.zeros((1, 1, 2, 3))), 1)


def test_backward_and_graph():
    x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    y = (relu(x) * 2.0).sum()
    graph = Graph.trace(y)
    assert x in graph.leaves
    y.backward()
    assert x.grad.tolist() == [2.0, 0.0, 2.0]


def test_backward_keeps_activations():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(1, 2, 3, 3)), requires_grad=True)
    k = Tensor(rng.normal(size=(2, 2, 3, 3)), requires_grad=True)
    hidden = relu(conv2d(x, k, pad=1))
    before = hidden.data.copy()
    global_avg_pool(hidden).sum().backward()
    np.testing.assert_array_equal(hidden.data, before)
    assert x.grad.shape == x.shape
    assert k.grad.shape == k.shape


def test_no_grad():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_non_finite_is_an_error():
    with pytest.raises(NonFiniteError):
        Tensor([1.0]) * float("inf")


def test_double_precision_mode():
    with double_precision():
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


def test_grad_check_square():
    assert grad_check(lambda x: (x**2).sum(), [1.0, 2.0]) < 1e-6
    assert grad_check(lambda x: (x * 3.0).sum(), [0.5, -1.5]) < 1e-6


@pytest.mark.parametrize("seed", range(10))
def test_grad_check_ops(seed):
    rng = np.random.default_rng(seed)
    kernel = rng.normal(size=(2, 3, 3, 3))
    up = rng.normal(size=(2, 2, 2, 2))
    weights = rng.normal(size=(2, 2, 5, 5))
    point = rng.normal(size=(1, 3, 4, 4))

    def conv(x):
        return (conv2d(x, Tensor(kernel), stride=1, pad=1) ** 2).sum()

    def upsample(x):
        y = transposed_conv2d(conv2d(x, Tensor(kernel), pad=1), Tensor(up), 2, (9, 9))
        return (y**2).sum()

    def resize(x):
        return (bilinear_resize(x[:, :2], (5, 5)) * Tensor(weights)).sum()

    def classify(x):
        logits = global_avg_pool(x).reshape(1, 3)
        return cross_entropy(logits, [1]) + softmax(logits).sum()

    for f in (conv, upsample, resize, classify):
        assert grad_check(f, point) < 1e-3


@pytest.mark.parametrize("seed", range(10))
def test_grad_check_mixing_ops(seed):
    rng = np.random.default_rng(seed)
    weights = rng.normal(size=(3, 3, 3, 3))
    point = rng.normal(size=(1, 3, 3, 3))

    def gate(x):
        return (sigmoid(x) * Tensor(weights[0])).sum()

    def stacked(x):
        y = stack([x[:, :1], x[:, 1:2] * 2.0, x[:, 2:]], axis=0)
        return (y * Tensor(weights[:, None, :1])).sum()

    def concat(x):
        y = concat_channels([x[:, 2:], x[:, :2]])
        return (y**2 * Tensor(weights[0])).sum()

    def weighted(x):
        y = softmax_weighted_sum(stack([x, x * x, -x], axis=0), axis=0)
        return (y * Tensor(weights[0])).sum()

    def attentive(x):
        y = self_attentive_sum([x[:, :1], x[:, 1:2], x[:, 2:]])
        return (y * Tensor(weights[0, :1])).sum()

    for f in (gate, stacked, concat, weighted, attentive):
        assert grad_check(f, point) < 1e-3


def _split_taps(x: Tensor, n: int, x3: Tensor) -> Taps:
    return Taps(x0=x[:, n:], x2=x[:, :n], x3=x3, X=x3)


@pytest.mark.parametrize("seed", range(10))
def test_grad_check_rotation_lens(seed):
    n = 2
    rng = np.random.default_rng(seed)
    with double_precision():
        lens = RotationLens(90, 5 * n, 4 * n, LensConfig(init="random", groups=2, seed=seed))
    x3 = rng.normal(size=(1, 4 * n, 3, 3))
    weights = rng.normal(size=(1, 4 * n, 3, 3))
    point = rng.normal(size=(1, 5 * n, 3, 3))

    def f(x):
        return (lens(_split_taps(x, n, Tensor(x3))) * Tensor(weights)).sum()

    assert grad_check(f, point) < 1e-3


@pytest.mark.parametrize("seed", range(10))
def test_grad_check_scaling_lens(seed):
    n = 2
    rng = np.random.default_rng(seed)
    with double_precision():
        lens = ScalingLens(0.5, 5 * n, 4 * n, LensConfig(init="random", groups=2, seed=seed))
        lens.alpha.data = np.array(0.7)
    weights = rng.normal(size=(1, 4 * n, 4, 4))
    point = rng.normal(size=(1, 5 * n, 2, 2))

    def f(x):
        # x3 taken from the input so the bilinear branch is checked too
        return (lens(_split_taps(x, n, x[:, n:]), (4, 4)) * Tensor(weights)).sum()

    assert grad_check(f, point) < 1e-3
