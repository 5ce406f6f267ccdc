"""Policy network and Gumbel-Softmax routing decisions.

The policy's affine outputs are used directly as log-scores: for every
sample and spot there are two scores, channel 0 for the teacher path and
channel 1 for the student path. Gumbel noise perturbs both; the forward
decision is the argmax, the backward signal is the tempered softmax of the
same perturbed scores.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError
from .network import he_uniform

GUMBEL_CLAMP = 1e-12


class PolicyParams:
    """One affine layer: concat(teacher_last, student_last) -> [num_spots, 2] scores."""

    def __init__(self, weight: Tensor, bias: Tensor, num_spots: int):
        if weight.shape[1] != 2 * num_spots or bias.shape != (2 * num_spots,):
            raise ShapeError(f"policy output width {weight.shape[1]} != 2 * {num_spots}")
        self.weight = weight
        self.bias = bias
        self.num_spots = num_spots

    @classmethod
    def build(cls, teacher_width: int, student_width: int, num_spots: int, seed: int, init: str = "he"):
        fan_in = teacher_width + student_width
        if init == "zeros":
            w = np.zeros((fan_in, 2 * num_spots))
        elif init == "he":
            w = he_uniform(np.random.default_rng(seed), fan_in, 2 * num_spots)
        else:
            raise ConfigError(f"unknown policy init {init!r}")
        return cls(Tensor(w, True, "policy.weight"), Tensor(np.zeros(2 * num_spots), True, "policy.bias"), num_spots)

    @property
    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    @property
    def input_width(self) -> int:
        return self.weight.shape[0]


def policy_logits(p: PolicyParams, feat_t_last: Tensor, feat_s_last: Tensor) -> Tensor:
    """Scores of shape ``[B, num_spots, 2]``."""
    ft = ad.concat(ad.as_tensor(feat_t_last), ad.as_tensor(feat_s_last))
    if ft.shape[1] != p.input_width:
        raise ShapeError(f"policy expects input width {p.input_width}, got {ft.shape[1]}")
    out = ad.affine(ft, p.weight, p.bias)
    return ad.reshape(out, (ft.shape[0], p.num_spots, 2))


def sample_gumbel(shape, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(shape)
    u = np.clip(u, GUMBEL_CLAMP, 1.0 - GUMBEL_CLAMP)
    return -np.log(-np.log(u))


def _scores(logits) -> np.ndarray:
    return logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)


def gumbel_forward(logits, noise) -> np.ndarray:
    """One-hot argmax of perturbed scores; ties go to the teacher channel."""
    perturbed = _scores(logits) + np.asarray(noise)
    teacher = perturbed[..., 0] >= perturbed[..., 1]
    return np.stack([teacher, ~teacher], axis=-1).astype(np.float64)


def gumbel_relaxed(logits: Tensor, noise, tau: float) -> Tensor:
    """Tempered 2-way softmax of perturbed scores; returns the full ``[B, S, 2]`` tensor."""
    if tau <= 0:
        raise ConfigError(f"Gumbel-Softmax temperature must be positive, got {tau}")
    logits = ad.as_tensor(logits)
    shape = logits.shape
    flat = ad.reshape(logits, (-1, 2))
    perturbed = ad.add(flat, Tensor(np.asarray(noise, dtype=np.float64).reshape(-1, 2)))
    probs = ad.softmax(ad.scale(perturbed, 1.0 / tau))
    return ad.reshape(probs, shape)


@dataclass
class RoutingDecision:
    """Per-sample teacher-path weights for every spot.

    ``forward_w`` is the discrete 0/1 choice (1 = teacher). ``relaxed_w`` is
    the relaxed teacher weight. ``w`` carries ``forward_w``'s values with
    ``relaxed_w``'s gradient and is what the routing pass consumes.
    """

    forward_w: np.ndarray
    relaxed_w: Tensor
    w: Tensor
    tau: float

    @property
    def num_spots(self) -> int:
        return self.forward_w.shape[1]

    @classmethod
    def constant(cls, values) -> "RoutingDecision":
        """A fixed decision with no policy behind it (tests, ablations)."""
        v = np.asarray(values, dtype=np.float64)
        return cls(v.copy(), Tensor(v.copy()), Tensor(v.copy()), tau=float("nan"))


def straight_through(logits: Tensor, noise, tau: float) -> RoutingDecision:
    hard = gumbel_forward(logits, noise)[..., 0]
    relaxed = gumbel_relaxed(logits, noise, tau)
    b, s = hard.shape
    relaxed_teacher = ad.column(ad.reshape(relaxed, (b * s, 2)), 0)
    relaxed_teacher = ad.reshape(relaxed_teacher, (b, s))
    return RoutingDecision(hard, relaxed_teacher, ad.straight_through(hard, relaxed_teacher), tau)


@dataclass(frozen=True)
class TauSchedule:
    tau0: float = 5.0
    tau_min: float = 0.5
    decay: float | None = None

    def __post_init__(self):
        if not self.tau0 >= self.tau_min > 0:
            raise ConfigError(f"need tau0 >= tau_min > 0, got {self.tau0}, {self.tau_min}")
        if self.decay is not None and not 0 < self.decay <= 1:
            raise ConfigError(f"tau decay must lie in (0, 1], got {self.decay}")

    def resolved_decay(self, epochs: int) -> float:
        """Explicit decay, else the factor that lands on ``tau_min`` at the last epoch."""
        if self.decay is not None:
            return self.decay
        if epochs <= 1:
            return 1.0
        return (self.tau_min / self.tau0) ** (1.0 / (epochs - 1))


def tau_at(schedule: TauSchedule, epoch: int, epochs: int | None = None) -> float:
    if epoch < 0:
        raise ConfigError("epoch must be non-negative")
    decay = schedule.resolved_decay(epochs or 0) if schedule.decay is None else schedule.decay
    return max(schedule.tau_min, schedule.tau0 * math.pow(decay, epoch))
