import numpy as np
import pytest

from sakd import autodiff as ad
from sakd.autodiff import Tensor, finite_diff_check
from sakd.errors import ConfigError, ShapeError
from sakd.network import AdaptionSet, BlockSpec, Network, NetworkSpec, adapt, build_network, forward_features, freeze


@pytest.fixture
def spec():
    return NetworkSpec.mlp(6, [8, 5, 7], 4)


def numpy_forward(net, x):
    """Independent re-implementation of the MLP forward pass."""
    feats, h = [], x
    fan_in = net.spec.input_dim
    for i, block in enumerate(net.spec.blocks):
        for j, (width, act) in enumerate(block.layers):
            h = h @ net.params[f"blocks.{i}.{j}.weight"].data + net.params[f"blocks.{i}.{j}.bias"].data
            if act == "relu":
                h = np.maximum(h, 0)
        feats.append(h)
    return feats, h @ net.params["classifier.weight"].data + net.params["classifier.bias"].data


def test_build_is_seed_deterministic(spec):
    assert Network.build(spec, 3).digest() == Network.build(spec, 3).digest()
    assert Network.build(spec, 3).digest() != Network.build(spec, 4).digest()


def test_he_uniform_bounds_and_zero_bias(spec):
    net = build_network(spec, 0)
    w = net.params["blocks.0.0.weight"].data
    assert np.abs(w).max() <= np.sqrt(6 / 6)
    assert np.all(net.params["blocks.1.0.bias"].data == 0)


def test_forward_features_shapes_and_values(spec):
    net = build_network(spec, 1)
    x = np.random.default_rng(0).normal(size=(3, 6))
    bundle = forward_features(net, x)
    assert [f.shape for f in bundle.block_features] == [(3, 8), (3, 5), (3, 7)]
    feats, logits = numpy_forward(net, x)
    for a, b in zip(bundle.block_features, feats):
        np.testing.assert_allclose(a.data, b, atol=1e-14)
    np.testing.assert_allclose(bundle.logits.data, logits, atol=1e-14)
    np.testing.assert_array_equal(net.logits(x), bundle.logits.data)


def test_forward_rejects_wrong_input_width(spec):
    with pytest.raises(ShapeError):
        build_network(spec, 0).forward_features(np.zeros((2, 5)))


def test_multi_layer_blocks():
    spec = NetworkSpec.mlp(3, [4, 4], 2, depth=2)
    net = Network.build(spec, 0)
    assert len(spec.blocks[0].layers) == 2
    feats, logits = numpy_forward(net, np.ones((2, 3)))
    np.testing.assert_allclose(net.logits(np.ones((2, 3))), logits, atol=1e-14)


def test_spec_round_trip(spec):
    assert NetworkSpec.from_dict(spec.to_dict()) == spec


def test_block_spec_rejects_bad_activation():
    with pytest.raises(ConfigError):
        BlockSpec(((4, "tanh"),))


def test_freeze_stops_parameter_gradients(spec):
    net = freeze(build_network(spec, 0))
    assert net.frozen
    x = Tensor(np.ones((2, 6)), True)
    g = ad.backward(ad.sum(net.forward_features(x).logits))
    assert all(p not in g for p in net.parameters)
    assert x in g


def test_constant_mode_detaches_params_but_not_input(spec):
    net = build_network(spec, 0)
    x = Tensor(np.ones((2, 6)), True)
    g = ad.backward(ad.sum(net.forward_features(x, constant=True).logits))
    assert all(p not in g for p in net.parameters) and x in g


def test_network_gradients_match_finite_differences(spec):
    net = build_network(spec, 2)
    rng = np.random.default_rng(1)
    x, y = rng.normal(size=(4, 6)), rng.integers(0, 4, size=4)
    err = finite_diff_check(lambda _: ad.cross_entropy(net.forward_features(x).logits, y), net.parameters, 1e-5)
    assert err <= 1e-4


def test_adaption_shapes_and_identity():
    t, s = NetworkSpec.mlp(3, [6, 6], 2), NetworkSpec.mlp(3, [4, 4], 2)
    ad_set = AdaptionSet.build(t, s, 0, init="identity")
    f_t = Tensor(np.arange(12.0).reshape(2, 6))
    out = adapt(ad_set, 1, "ts", f_t)
    np.testing.assert_array_equal(out.data, f_t.data[:, :4])
    out = adapt(ad_set, 0, "st", Tensor(np.ones((2, 4))))
    np.testing.assert_array_equal(out.data, np.c_[np.ones((2, 4)), np.zeros((2, 2))])


def test_adaption_errors():
    t, s = NetworkSpec.mlp(3, [6, 6], 2), NetworkSpec.mlp(3, [4], 2)
    with pytest.raises(ConfigError):
        AdaptionSet.build(t, s, 0)
    ok = AdaptionSet.build(t, NetworkSpec.mlp(3, [4, 4], 2), 0)
    with pytest.raises(ShapeError):
        ok.apply(0, "ts", Tensor(np.ones((2, 4))))
    with pytest.raises(ConfigError):
        ok.apply(2, "ts", Tensor(np.ones((2, 6))))
