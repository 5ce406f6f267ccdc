import itertools

import numpy as np
import pytest

from sakd import autodiff as ad
from sakd.autodiff import Tensor
from sakd.errors import ConfigError
from sakd.network import AdaptionSet, Network, NetworkSpec
from sakd.policy import PolicyParams, RoutingDecision
from sakd.routing import RoutingNetwork, routing_forward, routing_loss


def make(n_blocks=4, tw=7, sw=3, seed=0, init="he", twin=False):
    t_spec = NetworkSpec.mlp(5, [tw] * n_blocks, 4)
    s_spec = NetworkSpec.mlp(5, [sw] * n_blocks, 4)
    teacher = Network.build(t_spec, seed).freeze()
    student = Network.build(t_spec if twin else s_spec, seed if twin else seed + 1)
    adaptions = AdaptionSet.build(t_spec, student.spec, seed + 2, init)
    policy = PolicyParams.build(tw, student.spec.block_widths[-1], n_blocks + 1, seed + 3)
    return RoutingNetwork(teacher, student, adaptions, policy)


def path_oracle(rn, x, hard_row):
    """Follow the two streams by hand for a single 0/1 decision row."""
    def block(net, i, h):
        w = net.params[f"blocks.{i}.0.weight"].data
        b = net.params[f"blocks.{i}.0.bias"].data
        return np.maximum(h @ w + b, 0)

    def head(net, h):
        return h @ net.params["classifier.weight"].data + net.params["classifier.bias"].data

    def adapt(i, d, h):
        return h @ rn.adaptions.params[f"adapt.{i}.{d}.weight"].data + rn.adaptions.params[f"adapt.{i}.{d}.bias"].data

    in_t = in_s = x
    for i, choice in enumerate(hard_row[:-1]):
        f_t, f_s = block(rn.teacher, i, in_t), block(rn.student, i, in_s)
        if choice:
            in_t, in_s = f_t, adapt(i, "ts", f_t)
        else:
            in_t, in_s = adapt(i, "st", f_s), f_s
    return head(rn.teacher, in_t) if hard_row[-1] else head(rn.student, in_s)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_all_teacher_reproduces_teacher_logits(seed):
    rn = make(seed=seed)
    x = np.random.default_rng(seed).normal(size=(6, 5))
    out = routing_forward(rn, x, RoutingDecision.constant(np.ones((6, 5))))
    assert np.abs(out.data - rn.teacher.logits(x)).max() <= 1e-12


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_all_student_reproduces_student_logits(seed):
    rn = make(seed=seed)
    x = np.random.default_rng(seed).normal(size=(6, 5))
    out = routing_forward(rn, x, RoutingDecision.constant(np.zeros((6, 5))))
    assert np.abs(out.data - rn.student.logits(x)).max() <= 1e-12


def test_twin_networks_with_identity_adaptions_enumeration():
    rn = make(n_blocks=2, tw=4, sw=4, init="identity", twin=True)
    x = np.random.default_rng(7).normal(size=(1, 5))
    reference = rn.teacher.logits(x)
    for bits in itertools.product([0.0, 1.0], repeat=3):
        out = routing_forward(rn, x, RoutingDecision.constant(np.array([bits])))
        assert np.abs(out.data - reference).max() <= 1e-12, bits
        assert np.abs(out.data - path_oracle(rn, x, bits)).max() <= 1e-12, bits


def test_hard_decisions_match_path_oracle_with_distinct_networks():
    rn = make(n_blocks=2, seed=5)
    x = np.random.default_rng(8).normal(size=(1, 5))
    for bits in itertools.product([0.0, 1.0], repeat=3):
        out = routing_forward(rn, x, RoutingDecision.constant(np.array([bits])))
        np.testing.assert_allclose(out.data, path_oracle(rn, x, bits), atol=1e-12, rtol=0)


def test_per_sample_decisions_are_independent():
    rn = make(n_blocks=2, seed=3)
    x = np.random.default_rng(9).normal(size=(3, 5))
    rows = np.array([[1.0, 0.0, 1.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]])
    out = routing_forward(rn, x, RoutingDecision.constant(rows))
    for b in range(3):
        np.testing.assert_allclose(out.data[b], path_oracle(rn, x[b : b + 1], rows[b])[0], atol=1e-12, rtol=0)


def test_routing_gradient_reaches_only_policy_and_adaptions():
    rn = make(n_blocks=2)
    x = np.random.default_rng(0).normal(size=(3, 5))
    w = Tensor(np.full((3, 3), 0.5), True)
    dec = RoutingDecision(np.ones((3, 3)), w, w, 1.0)
    g = ad.backward(routing_loss(routing_forward(rn, x, dec), [0, 1, 2], 1.0))
    assert w in g
    assert all(p not in g for p in rn.student.parameters + rn.teacher.parameters)
    assert any(p in g for p in rn.adaptions.parameters)


def test_student_mode_restored_after_routing_pass():
    rn = make(n_blocks=2)
    routing_forward(rn, np.zeros((1, 5)), RoutingDecision.constant(np.ones((1, 3))))
    assert rn.student.mode == "train"


def test_spot_count_mismatch():
    rn = make(n_blocks=2)
    with pytest.raises(ConfigError):
        routing_forward(rn, np.zeros((1, 5)), RoutingDecision.constant(np.ones((1, 2))))
    with pytest.raises(ConfigError):
        RoutingNetwork(rn.teacher, rn.student, rn.adaptions, PolicyParams.build(7, 3, 4, 0))


def test_routing_loss_beta3():
    logits = Tensor(np.zeros((2, 4)))
    assert routing_loss(logits, [0, 1], 0.0).item() == 0.0
    assert routing_loss(logits, [0, 1], 2.0).item() == pytest.approx(2 * np.log(4), abs=1e-14)
    with pytest.raises(ConfigError):
        routing_loss(logits, [0, 1], -1.0)
