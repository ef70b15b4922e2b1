import numpy as np
import pytest

from featlens.errors import FrozenParameterError, ShapeError
from featlens.host import HostConfig, Xlayer, build_host, freeze
from featlens.optim import SGD
from featlens.tensor import Tensor, global_avg_pool


def test_default_shape_trace():
    model = build_host(HostConfig())
    logits, taps = model.forward_with_taps(np.zeros((1, 1, 56, 56), dtype=np.float32))
    assert logits.shape == (1, 10)
    assert taps.x0.shape == (1, 256, 7, 7)
    assert taps.x2.shape == (1, 64, 7, 7)
    assert taps.x3.shape == (1, 256, 7, 7)
    assert taps.X.shape == (1, 256, 7, 7)
    assert np.isfinite(logits.data).all()
    assert HostConfig().feature_hw == (7, 7)


def test_same_seed_same_parameters(tiny_host_config):
    assert build_host(tiny_host_config).checksum() == build_host(tiny_host_config).checksum()
    other = HostConfig(**{**tiny_host_config.to_dict(), "seed": 1})
    assert build_host(other).checksum() != build_host(tiny_host_config).checksum()


def test_logits_from_taps(tiny_host):
    batch = np.random.default_rng(0).uniform(size=(3, 1, 16, 16)).astype(np.float32)
    logits, taps = tiny_host.forward_with_taps(batch)
    np.testing.assert_array_equal(tiny_host.head(taps.X).data, logits.data)
    again, _ = tiny_host.forward_with_taps(batch)
    np.testing.assert_array_equal(again.data, logits.data)
    # X is the post-add, post-ReLU block output
    np.testing.assert_allclose(taps.X.data, np.maximum(taps.x3.data + taps.x0.data, 0), atol=1e-6)
    assert global_avg_pool(taps.X).shape == (3, 16)


def test_input_shape_checked(tiny_host):
    with pytest.raises(ShapeError):
        tiny_host.forward_with_taps(np.zeros((1, 1, 12, 12), dtype=np.float32))
    with pytest.raises(ShapeError):
        tiny_host.forward_with_taps(np.zeros((1, 3, 16, 16), dtype=np.float32))


def test_config_underflow():
    with pytest.raises(ShapeError):
        build_host(HostConfig(input_hw=(8, 8), stage_widths=(4, 4), bottleneck_width=2))


def test_freeze(tiny_host_config):
    model = build_host(tiny_host_config)
    host = freeze(model)
    checksum = host.checksum()
    optimizer = SGD(model.parameters(), lr=0.1)
    for _ in range(5):
        optimizer.step()
    assert host.checksum() == checksum
    assert all(grad is None for grad in host.gradient_buffers().values())
    with pytest.raises(FrozenParameterError):
        model.parameters()[0].requires_grad = True


def test_head_gradients_reach_features_only(tiny_host):
    features = Tensor(np.ones((1, 16, 4, 4)), requires_grad=True)
    tiny_host.head(features).sum().backward()
    assert features.grad is not None
    assert all(grad is None for grad in tiny_host.gradient_buffers().values())


def test_xlayer_starts_as_identity(tiny_host):
    batch = np.random.default_rng(1).uniform(size=(2, 1, 16, 16)).astype(np.float32)
    xlayer = Xlayer(tiny_host.config, seed=3)
    np.testing.assert_array_equal(xlayer.logits(tiny_host, batch).data, tiny_host.predict(batch))


def test_host_config_round_trip(tiny_host_config):
    obj = tiny_host_config.to_dict()
    assert obj["input_hw"] == [16, 16]
    assert HostConfig.from_dict(obj) == tiny_host_config
