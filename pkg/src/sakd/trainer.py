"""The spot-adaptive training loop.

One step, in order: teacher forward (no tape), student forward, policy
decision from the detached last-block features, gating mask ``d`` from the
strategy, gated student objective and its gradient, routing pass and its
gradient, then both SGD updates. Both gradients are taken at the same
pre-update parameters, so the order of the two updates does not matter.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import GradMap, Tensor
from .distillers import DistillConfig, HintProjections, assemble_student_loss
from .errors import ConfigError, InvariantError, NumericError
from .policy import RoutingDecision, TauSchedule, policy_logits, sample_gumbel, straight_through, tau_at
from .routing import RoutingNetwork, routing_forward, routing_loss

log = logging.getLogger(__name__)


class Strategy(str, Enum):
    ADAPTIVE = "adaptive"
    ALWAYS = "always"
    ANTI = "anti"
    RAND = "rand"
    NONE = "none"

    @property
    def trains_policy(self) -> bool:
        return self in (Strategy.ADAPTIVE, Strategy.ANTI)


STRATEGY_ORDER = tuple(s.value for s in Strategy)


class TeacherMode(str, Enum):
    FROZEN = "frozen"
    SCRATCH = "scratch"
    PRETRAINED = "pretrained-co-train"


@dataclass
class SgdState:
    base_lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    milestones: tuple[int, ...] = ()
    gamma: float = 0.1
    lr: float = field(default=float("nan"))
    velocity: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ConfigError("learning rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight decay must be non-negative")
        if math.isnan(self.lr):
            self.lr = self.base_lr


def lr_at(state: SgdState, epoch: int) -> float:
    passed = sum(1 for m in state.milestones if epoch >= m)
    return state.base_lr * state.gamma**passed


def sgd_step(params: list[Tensor], grads: GradMap, state: SgdState) -> None:
    """``v <- m * v + g + wd * p``; ``p <- p - lr * v``. Parameters without a gradient are skipped."""
    for p in params:
        g = grads.get(p)
        if g is None:
            continue
        if g.shape != p.shape:
            raise InvariantError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        step = g + state.weight_decay * p.data if state.weight_decay else g
        v = state.velocity.get(id(p))
        v = step if v is None or state.momentum == 0 else state.momentum * v + step
        state.velocity[id(p)] = v
        p.data = p.data - state.lr * v


def apply_strategy(strategy: Strategy, decision: RoutingDecision | None, rng: np.random.Generator, shape=None) -> np.ndarray:
    """Gate matrix ``d`` ``[B, N+1]``: 1 where the student is distilled at that spot."""
    strategy = Strategy(strategy)
    if decision is not None:
        shape = decision.forward_w.shape
    if strategy is Strategy.ADAPTIVE:
        return decision.forward_w.copy()
    if strategy is Strategy.ANTI:
        return 1.0 - decision.forward_w
    if shape is None:
        raise ConfigError(f"strategy {strategy.value} needs a decision or a shape")
    if strategy is Strategy.ALWAYS:
        return np.ones(shape)
    if strategy is Strategy.NONE:
        return np.zeros(shape)
    return (rng.random(shape) < 0.5).astype(np.float64)


def distill_probability(decisions: list[np.ndarray]) -> np.ndarray:
    if not decisions:
        raise ConfigError("no decisions recorded")
    stacked = np.concatenate(decisions, axis=0)
    return stacked.mean(axis=0)


@dataclass
class Optimizers:
    student: SgdState
    routing: SgdState

    def set_lr(self, lr: float) -> None:
        self.student.lr = lr
        self.routing.lr = lr


@dataclass
class StepResult:
    ce: float
    kl: float
    kd: float
    routing: float
    total: float
    forward_w: np.ndarray
    gate: np.ndarray
    student_grads: GradMap | None = None
    routing_grads: GradMap | None = None


class Trainer:
    """Owns the parameter groups, optimizers and random streams of one run."""

    def __init__(
        self,
        rn: RoutingNetwork,
        cfg: DistillConfig,
        strategy: Strategy = Strategy.ADAPTIVE,
        *,
        sgd: SgdState | None = None,
        tau: TauSchedule | None = None,
        epochs: int = 60,
        batch_size: int = 32,
        seed: int = 0,
        proj: HintProjections | None = None,
    ):
        self.rn = rn
        self.cfg = cfg.resolve(rn.num_blocks)
        self.strategy = Strategy(strategy)
        self.tau = tau or TauSchedule()
        self.epochs = epochs
        if batch_size < 1:
            raise ConfigError("batch size must be positive")
        self.batch_size = batch_size
        self.proj = proj if proj is not None else HintProjections.build(self.cfg, rn.teacher.spec, rn.student.spec, seed)
        sgd = sgd or SgdState()
        self.opt = Optimizers(
            SgdState(sgd.base_lr, sgd.momentum, sgd.weight_decay, tuple(sgd.milestones), sgd.gamma),
            SgdState(sgd.base_lr, sgd.momentum, sgd.weight_decay, tuple(sgd.milestones), sgd.gamma),
        )
        streams = np.random.SeedSequence(seed).spawn(3)
        self.shuffle_rng = np.random.default_rng(streams[0])
        self.noise_rng = np.random.default_rng(streams[1])
        self.gate_rng = np.random.default_rng(streams[2])
        if not rn.teacher_trainable:
            rn.teacher.freeze()

    @property
    def student_group(self) -> list[Tensor]:
        group = self.rn.student.parameters + self.proj.parameters
        if self.rn.teacher_trainable:
            group += self.rn.teacher.parameters
        return group

    @property
    def routing_group(self) -> list[Tensor]:
        return self.rn.routing_parameters

    def decide(self, feat_t_last: Tensor, feat_s_last: Tensor, tau: float) -> RoutingDecision:
        scores = policy_logits(self.rn.policy, ad.detach(feat_t_last), ad.detach(feat_s_last))
        noise = sample_gumbel(scores.shape, self.noise_rng)
        return straight_through(scores, noise, tau)

    def step(self, x: np.ndarray, y: np.ndarray, tau: float, *, update_routing: bool | None = None, keep_grads: bool = False) -> StepResult:
        rn, cfg = self.rn, self.cfg
        bundle_t = rn.teacher.forward_features(x)
        bundle_s = rn.student.forward_features(x)
        decision = self.decide(bundle_t.block_features[-1], bundle_s.block_features[-1], tau)
        d = apply_strategy(self.strategy, decision, self.gate_rng)

        ls = assemble_student_loss(bundle_s, bundle_t, y, d, cfg, self.proj)
        out = routing_forward(rn, x, decision)
        lr_ = routing_loss(out, y, cfg.beta3)
        routing_ce = ad.cross_entropy(ad.detach(out), y).item()
        for name, value in (("ce", ls.ce), ("kl", ls.kl), ("kd", ls.kd), ("routing", routing_ce)):
            if not math.isfinite(value):
                raise NumericError(f"non-finite {name} loss term ({value})")

        grads_s = ad.backward(ls.total)
        if update_routing is None:
            update_routing = self.strategy.trains_policy
        grads_r = ad.backward(lr_) if update_routing else GradMap()

        student_group = self.student_group
        if rn.teacher_trainable:
            merged = grads_s.restrict(student_group)
            for t in rn.teacher.parameters:
                if t in grads_r:
                    g = grads_r[t]
                    merged._accumulate(t, g)
            sgd_step(student_group, merged, self.opt.student)
        else:
            sgd_step(student_group, grads_s, self.opt.student)
        sgd_step(self.routing_group, grads_r, self.opt.routing)

        # read back from the objectives that were differentiated, not rebuilt from the parts
        total = ls.total.item() + lr_.item()
        return StepResult(
            ls.ce, ls.kl, ls.kd, routing_ce, total, decision.forward_w, d,
            grads_s if keep_grads else None, grads_r if keep_grads else None,
        )

    def batches(self, n: int) -> list[np.ndarray]:
        order = self.shuffle_rng.permutation(n)
        chunks = [order[i : i + self.batch_size] for i in range(0, n, self.batch_size)]
        if len(chunks) > 1 and len(chunks[-1]) == 1:
            last = chunks.pop()
            chunks[-1] = np.concatenate([chunks[-1], last])
        return chunks

    def run_epoch(self, epoch: int, x: np.ndarray, y: np.ndarray, step_hook: Callable | None = None) -> "EpochStats":
        lr = lr_at(self.opt.student, epoch)
        self.opt.set_lr(lr)
        tau = tau_at(self.tau, epoch, self.epochs)
        sums = dict(ce=0.0, kl=0.0, kd=0.0, routing=0.0, total=0.0)
        decisions, gates = [], []
        for idx in self.batches(len(y)):
            res = self.step(x[idx], y[idx], tau, keep_grads=step_hook is not None)
            if step_hook is not None:
                step_hook(self, res)
            for k in sums:
                sums[k] += getattr(res, k) * len(idx)
            decisions.append(res.forward_w)
            gates.append(res.gate)
        n = len(y)
        return EpochStats(
            epoch=epoch,
            lr=lr,
            tau=tau,
            **{k: v / n for k, v in sums.items()},
            p_spot=distill_probability(decisions).tolist(),
            gate_rate=distill_probability(gates).tolist(),
        )

    def train(self, train_x, train_y, test_x=None, test_y=None, step_hook: Callable | None = None) -> list["EpochStats"]:
        stats = []
        for epoch in range(self.epochs):
            es = self.run_epoch(epoch, train_x, train_y, step_hook)
            es.train_acc = self.rn.student.accuracy(train_x, train_y)
            if test_x is not None:
                logits = self.rn.student.logits(test_x)
                es.test_acc = float(np.mean(logits.argmax(axis=1) == test_y))
                es.test_ce = ad.cross_entropy(Tensor(logits), test_y).item()
            log.debug("epoch %d: ce=%.4f acc=%.4f p=%s", epoch, es.ce, es.train_acc, np.round(es.p_spot, 3))
            stats.append(es)
        return stats


@dataclass
class EpochStats:
    epoch: int
    lr: float
    tau: float
    ce: float
    kl: float
    kd: float
    routing: float
    total: float
    p_spot: list[float]
    gate_rate: list[float]
    train_acc: float = float("nan")
    test_acc: float = float("nan")
    test_ce: float = float("nan")


def train_step(trainer: Trainer, x, y, tau: float, **kw) -> StepResult:
    return trainer.step(x, y, tau, **kw)


def train(trainer: Trainer, train_x, train_y, test_x=None, test_y=None, step_hook=None):
    """Run all epochs; returns ``(stats, student)``."""
    stats = trainer.train(train_x, train_y, test_x, test_y, step_hook)
    return stats, trainer.rn.student


def train_plain(net, x, y, *, epochs: int, batch_size: int, sgd: SgdState, seed: int) -> list[float]:
    """Cross-entropy-only training, used for teacher pre-training. Returns per-epoch mean loss."""
    rng = np.random.default_rng(seed)
    state = SgdState(sgd.base_lr, sgd.momentum, sgd.weight_decay, tuple(sgd.milestones), sgd.gamma)
    losses = []
    for epoch in range(epochs):
        state.lr = lr_at(state, epoch)
        order = rng.permutation(len(y))
        total = 0.0
        for i in range(0, len(y), batch_size):
            idx = order[i : i + batch_size]
            loss = ad.cross_entropy(net.forward_features(x[idx]).logits, y[idx])
            if not math.isfinite(loss.item()):
                raise NumericError(f"non-finite cross-entropy at epoch {epoch}")
            sgd_step(net.parameters, ad.backward(loss), state)
            total += loss.item() * len(idx)
        losses.append(total / len(y))
    return losses
