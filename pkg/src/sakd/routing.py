"""Multi-path routing network: teacher and student blocks interleaved per sample."""

from __future__ import annotations

from dataclasses import dataclass

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError
from .network import AdaptionSet, Network
from .policy import PolicyParams, RoutingDecision


@dataclass
class RoutingNetwork:
    teacher: Network
    student: Network
    adaptions: AdaptionSet
    policy: PolicyParams
    teacher_trainable: bool = False

    def __post_init__(self):
        nt, ns = self.teacher.spec.num_blocks, self.student.spec.num_blocks
        if nt != ns:
            raise ConfigError(f"teacher has {nt} blocks but student has {ns}")
        if self.teacher.spec.classifier_dim != self.student.spec.classifier_dim:
            raise ConfigError("teacher and student disagree on the number of classes")
        if self.policy.num_spots != nt + 1:
            raise ConfigError(f"policy emits {self.policy.num_spots} spots, expected {nt + 1}")

    @property
    def num_blocks(self) -> int:
        return self.teacher.spec.num_blocks

    @property
    def routing_parameters(self) -> list[Tensor]:
        return self.policy.parameters + self.adaptions.parameters


def routing_forward(rn: RoutingNetwork, x, decision: RoutingDecision) -> Tensor:
    """Routing logits ``[B, C]``.

    Two streams run side by side. At block ``i`` each stream's output is
    mixed with the other stream's (adapted) output using the teacher weight
    ``w[:, i]``; the logit spot mixes the two heads with ``w[:, N]``. Student
    parameters enter as constants, so only the policy (through ``w``) and
    the adaption maps receive gradient.
    """
    n = rn.num_blocks
    if decision.num_spots != n + 1:
        raise ConfigError(f"decision covers {decision.num_spots} spots, routing needs {n + 1}")
    teacher_const = not rn.teacher_trainable
    x = ad.as_tensor(x)
    rn.student.eval()
    try:
        input_t = input_s = x
        for i in range(n):
            f_t = rn.teacher.block(i, input_t, constant=teacher_const)
            f_s = rn.student.block(i, input_s, constant=True)
            w_i = ad.column(decision.w, i)
            input_s = ad.convex_combine(rn.adaptions.apply(i, "ts", f_t), f_s, w_i)
            input_t = ad.convex_combine(f_t, rn.adaptions.apply(i, "st", f_s), w_i)
        out_t = rn.teacher.head(input_t, constant=teacher_const)
        out_s = rn.student.head(input_s, constant=True)
        return ad.convex_combine(out_t, out_s, ad.column(decision.w, n))
    finally:
        rn.student.train()


def routing_loss(routing_logits: Tensor, targets, beta3: float = 1.0) -> Tensor:
    if beta3 < 0:
        raise ConfigError(f"beta3 must be non-negative, got {beta3}")
    if beta3 == 0:
        return Tensor(0.0)
    return ad.scale(ad.cross_entropy(routing_logits, targets), beta3)
