"""Finite-difference verification suites behind the ``gradcheck`` command."""

from __future__ import annotations

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor, finite_diff_check
from ..distillers import DistillConfig, DistillerKind, HintProjections, assemble_student_loss
from ..network import AdaptionSet, Network, NetworkSpec
from ..policy import PolicyParams, RoutingDecision, policy_logits, sample_gumbel, straight_through
from ..routing import RoutingNetwork, routing_forward, routing_loss

TOLERANCE = 1e-4
EPS = 1e-5
SCOPES = ("ops", "network", "policy", "end-to-end")


def _param(rng, *shape, low=-1.0, high=1.0):
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


def op_cases(rng: np.random.Generator):
    """(name, inputs, function) triples for every differentiable operator."""
    b, k, n, c = 3, 4, 2, 5
    targets = rng.integers(0, c, size=b)
    yield "matmul", [_param(rng, b, k), _param(rng, k, n)], lambda a, m: ad.matmul(a, m)
    yield "affine", [_param(rng, b, k), _param(rng, k, n), _param(rng, n)], ad.affine
    yield "add", [_param(rng, b, k), _param(rng, b, k)], ad.add
    yield "sub", [_param(rng, b, k), _param(rng, b, k)], ad.sub
    yield "mul", [_param(rng, b, k), _param(rng, b, k)], ad.mul
    yield "scale", [_param(rng, b, k)], lambda a: ad.scale(a, 2.5)
    # keep relu inputs away from the kink so central differences are valid
    shift = rng.choice([-1.0, 1.0], size=(b, k)) * rng.uniform(0.1, 1.0, size=(b, k))
    yield "relu", [Tensor(shift, True)], ad.relu
    yield "square", [_param(rng, b, k)], ad.square
    yield "abs_pow", [Tensor(shift, True)], lambda a: ad.abs_pow(a, 2.0)
    yield "concat", [_param(rng, b, k), _param(rng, b, n)], ad.concat
    yield "transpose", [_param(rng, b, k)], ad.transpose
    yield "reshape", [_param(rng, b, k)], lambda a: ad.reshape(a, (k, b))
    yield "column", [_param(rng, b, k)], lambda a: ad.column(a, 1)
    yield "sum_axis1", [_param(rng, b, k)], lambda a: ad.sum(a, axis=1)
    yield "mean", [_param(rng, b, k)], ad.mean
    yield "normalize_rows", [_param(rng, b, k)], ad.normalize_rows
    yield "softmax", [_param(rng, b, c, low=-3, high=3)], ad.softmax
    yield "log_softmax", [_param(rng, b, c, low=-3, high=3)], ad.log_softmax
    yield "cross_entropy", [_param(rng, b, c, low=-3, high=3)], lambda z: ad.cross_entropy(z, targets)
    teacher = rng.uniform(-3, 3, size=(b, c))
    yield "kl_divergence", [_param(rng, b, c, low=-3, high=3)], lambda z: ad.kl_divergence(z, teacher, 4.0)
    yield "convex_combine", [_param(rng, b, k), _param(rng, b, k), _param(rng, b, low=0.05, high=0.95)], ad.convex_combine


def check_ops(trials: int = 5, seed: int = 0) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    worst: dict[str, float] = {}
    for _ in range(trials):
        for name, inputs, fn in op_cases(rng):
            weights_rng = np.random.default_rng(rng.integers(2**32))
            probe = fn(*inputs)
            w = Tensor(weights_rng.normal(size=probe.shape))

            def f(xs, fn=fn, w=w):
                out = fn(*xs)
                return ad.sum(ad.mul(out, w)) if out.shape else ad.mul(out, w)

            worst[name] = max(worst.get(name, 0.0), finite_diff_check(f, inputs, EPS))
    return worst


def small_pair(seed: int = 0, n_blocks: int = 2):
    """A seeded teacher/student pair with mismatched widths, plus a batch."""
    rng = np.random.default_rng(seed)
    t_spec = NetworkSpec.mlp(5, [6] * n_blocks, 3)
    s_spec = NetworkSpec.mlp(5, [4] * n_blocks, 3)
    teacher = Network.build(t_spec, seed + 1).freeze()
    student = Network.build(s_spec, seed + 2)
    adaptions = AdaptionSet.build(t_spec, s_spec, seed + 3)
    policy = PolicyParams.build(6, 4, n_blocks + 1, seed + 4)
    rn = RoutingNetwork(teacher, student, adaptions, policy)
    x = rng.normal(size=(4, 5))
    y = rng.integers(0, 3, size=4)
    return rn, x, y, rng


def check_network(seed: int = 0) -> dict[str, float]:
    rn, x, y, _ = small_pair(seed)
    net = rn.student
    xt = Tensor(x, True)

    def f(_):
        return ad.cross_entropy(net.forward_features(xt).logits, y)

    return {"forward_features": finite_diff_check(f, net.parameters + [xt], EPS)}


def check_policy(seed: int = 0) -> dict[str, float]:
    rn, x, _, rng = small_pair(seed)
    ft = Tensor(rn.teacher.forward_features(x).block_features[-1].data)
    fs = Tensor(rn.student.forward_features(x).block_features[-1].data)
    weights = Tensor(rng.normal(size=(4, rn.policy.num_spots, 2)))

    def f(_):
        return ad.sum(ad.mul(policy_logits(rn.policy, ft, fs), weights))

    report = {"policy_logits": finite_diff_check(f, rn.policy.parameters, EPS)}

    noise = sample_gumbel((4, rn.policy.num_spots, 2), rng)
    g_dec = ad.backward(ad.sum(straight_through(policy_logits(rn.policy, ft, fs), noise, 1.0).w))
    g_rel = ad.backward(ad.sum(straight_through(policy_logits(rn.policy, ft, fs), noise, 1.0).relaxed_w))
    same = all(np.array_equal(g_dec[p], g_rel[p]) for p in rn.policy.parameters)
    report["straight_through_identity"] = 0.0 if same else float("inf")
    return report


def check_end_to_end(seed: int = 0) -> dict[str, float]:
    """Gradients of the gated student objective and the routing loss on an N = 2 pair."""
    rn, x, y, rng = small_pair(seed)
    cfg = DistillConfig(kind=DistillerKind.FITNETS, spots=(2,)).resolve(2)
    proj = HintProjections.build(cfg, rn.teacher.spec, rn.student.spec, seed + 5)
    d = (rng.random((4, 3)) < 0.5).astype(float)
    d[0] = 1.0
    bundle_t = rn.teacher.forward_features(x)

    def student_loss(_):
        return assemble_student_loss(rn.student.forward_features(x), bundle_t, y, d, cfg, proj).total

    report = {"student_loss": finite_diff_check(student_loss, rn.student.parameters + proj.parameters, EPS)}

    hard = (rng.random((4, 3)) < 0.5).astype(float)
    decision = RoutingDecision.constant(hard)

    def routing_hard(_):
        return routing_loss(routing_forward(rn, x, decision), y, 1.0)

    report["routing_adaptions"] = finite_diff_check(routing_hard, rn.adaptions.parameters, EPS)

    ft = Tensor(bundle_t.block_features[-1].data)
    fs = Tensor(rn.student.forward_features(x).block_features[-1].data)
    noise = sample_gumbel((4, 3, 2), rng)

    def routing_relaxed(_):
        dec = straight_through(policy_logits(rn.policy, ft, fs), noise, 1.0)
        soft = RoutingDecision(dec.forward_w, dec.relaxed_w, dec.relaxed_w, dec.tau)
        return routing_loss(routing_forward(rn, x, soft), y, 1.0)

    report["routing_policy"] = finite_diff_check(routing_relaxed, rn.routing_parameters, EPS)
    return report


def run(scope: str, seed: int = 0) -> dict[str, float]:
    if scope == "ops":
        return check_ops(seed=seed)
    if scope == "network":
        return check_network(seed)
    if scope == "policy":
        return check_policy(seed)
    if scope == "end-to-end":
        return check_end_to_end(seed)
    if scope == "all":
        out = {}
        for s in SCOPES:
            out.update({f"{s}/{k}": v for k, v in run(s, seed).items()})
        return out
    raise ValueError(f"unknown gradcheck scope {scope!r}")
