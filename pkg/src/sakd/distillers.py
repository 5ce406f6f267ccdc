"""Distillation losses and the gated student objective.

Spots are numbered from 1 as in the usual distillation-spot tables: spots
``1..N`` are block outputs and spot ``N + 1`` is the logit layer. Column
``i - 1`` of a decision matrix gates spot ``i``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, UsageError
from .network import FeatureBundle, NetworkSpec, he_uniform


class DistillerKind(str, Enum):
    KD_KL = "kd_kl"
    FITNETS = "fitnets"
    AT = "at"
    SP = "sp"

    @property
    def per_sample(self) -> bool:
        return self is not DistillerKind.SP

    @property
    def default_beta2(self) -> float:
        return {"kd_kl": 0.0, "fitnets": 1.0, "at": 1000.0, "sp": 3000.0}[self.value]

    def default_spots(self, n: int) -> tuple[int, ...]:
        if self is DistillerKind.KD_KL:
            return ()
        if self is DistillerKind.FITNETS:
            return (min(3, n),)
        if self is DistillerKind.AT:
            return tuple(range(2, n)) or (n,)
        return (max(n - 1, 1),)


@dataclass(frozen=True)
class DistillConfig:
    kind: DistillerKind = DistillerKind.FITNETS
    spots: tuple[int, ...] | None = None
    logit_spot_active: bool = True
    beta1: float = 1.0
    beta2: float | None = None
    beta3: float = 1.0
    T: float = 4.0
    at_power: float = 2.0
    kl_t_squared: bool = True

    def __post_init__(self):
        object.__setattr__(self, "kind", DistillerKind(self.kind))
        for name in ("beta1", "beta3"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.beta2 is not None and self.beta2 < 0:
            raise ConfigError("beta2 must be non-negative")
        if self.T <= 0:
            raise ConfigError(f"softening temperature T must be positive, got {self.T}")
        if self.at_power < 1:
            raise ConfigError("at_power must be at least 1")

    def resolve(self, n: int) -> "DistillConfig":
        """Fill in kind-dependent defaults for an ``n``-block pair and validate spots."""
        spots = self.kind.default_spots(n) if self.spots is None else tuple(int(s) for s in self.spots)
        bad = [s for s in spots if not 1 <= s <= n]
        if bad:
            raise ConfigError(f"intermediate spots {bad} outside 1..{n}")
        beta2 = self.kind.default_beta2 if self.beta2 is None else self.beta2
        return replace(self, spots=tuple(sorted(set(spots))), beta2=beta2)


@dataclass
class HintProjections:
    """Student->teacher regressors for feature distillers at width-mismatched spots."""

    params: dict[int, tuple[Tensor, Tensor]] = field(default_factory=dict)

    @classmethod
    def build(cls, cfg: DistillConfig, teacher: NetworkSpec, student: NetworkSpec, seed: int) -> "HintProjections":
        proj = cls()
        if cfg.kind not in (DistillerKind.FITNETS, DistillerKind.AT):
            return proj
        rng = np.random.default_rng(seed)
        for spot in cfg.spots or ():
            dt, ds = teacher.block_widths[spot - 1], student.block_widths[spot - 1]
            if dt != ds:
                w = Tensor(he_uniform(rng, ds, dt), True, f"hint.{spot}.weight")
                b = Tensor(np.zeros(dt), True, f"hint.{spot}.bias")
                proj.params[spot] = (w, b)
        return proj

    @property
    def parameters(self) -> list[Tensor]:
        return [t for pair in self.params.values() for t in pair]

    def __contains__(self, spot: int) -> bool:
        return spot in self.params

    def apply(self, spot: int, f_s: Tensor) -> Tensor:
        w, b = self.params[spot]
        return ad.affine(f_s, w, b)


def _const(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _project(f_s: Tensor, width: int, proj: HintProjections | None, spot: int | None) -> Tensor:
    if f_s.shape[1] == width and (proj is None or spot not in proj):
        return f_s
    if proj is None or spot not in proj:
        raise ConfigError(f"student width {f_s.shape[1]} != teacher width {width} and no hint projection")
    return proj.apply(spot, f_s)


def fitnets_hint(f_s: Tensor, f_t, proj: HintProjections | None = None, spot: int | None = None) -> Tensor:
    """Per-sample mean squared error between the (projected) student and teacher features."""
    t = _const(f_t)
    diff = ad.sub(_project(f_s, t.shape[1], proj, spot), Tensor(t))
    return ad.scale(ad.sum(ad.square(diff), axis=1), 1.0 / t.shape[1])


def attention_vector(f, p: float = 2.0):
    if isinstance(f, Tensor):
        return ad.normalize_rows(ad.abs_pow(f, p))
    a = np.abs(np.asarray(f, dtype=np.float64)) ** p
    n = np.sqrt((a * a).sum(axis=1, keepdims=True))
    return np.where(n > 0, a / np.where(n > 0, n, 1.0), 0.0)


def attention_transfer(f_s: Tensor, f_t, p: float = 2.0, proj: HintProjections | None = None, spot: int | None = None) -> Tensor:
    """Per-sample squared distance between normalized ``|f| ** p`` attention vectors."""
    t = _const(f_t)
    a_s = attention_vector(_project(f_s, t.shape[1], proj, spot), p)
    diff = ad.sub(a_s, Tensor(attention_vector(t, p)))
    return ad.sum(ad.square(diff), axis=1)


def _similarity(f):
    if isinstance(f, Tensor):
        return ad.normalize_rows(ad.matmul(f, ad.transpose(f)))
    g = f @ f.T
    n = np.sqrt((g * g).sum(axis=1, keepdims=True))
    return np.where(n > 0, g / np.where(n > 0, n, 1.0), 0.0)


def sp_loss(f_s: Tensor, f_t) -> Tensor:
    """Similarity-preserving loss: batch-level, ``||G_s - G_t||_F^2 / B^2``."""
    t = _const(f_t)
    b = t.shape[0]
    if b < 2 or f_s.shape[0] != b:
        raise ConfigError(f"similarity-preserving loss needs matching batches of at least 2, got {f_s.shape[0]}/{b}")
    diff = ad.sub(_similarity(f_s), Tensor(_similarity(t)))
    return ad.scale(ad.sum(ad.square(diff)), 1.0 / (b * b))


def spot_loss(cfg: DistillConfig, spot: int, f_s: Tensor, f_t, proj: HintProjections | None) -> Tensor:
    if cfg.kind is DistillerKind.FITNETS:
        return fitnets_hint(f_s, f_t, proj, spot)
    if cfg.kind is DistillerKind.AT:
        return attention_transfer(f_s, f_t, cfg.at_power, proj, spot)
    if cfg.kind is DistillerKind.SP:
        return sp_loss(f_s, f_t)
    raise ConfigError(f"{cfg.kind.value} has no intermediate-spot loss")


@dataclass
class StudentLoss:
    total: Tensor
    ce: float
    kl: float
    kd: float


def assemble_student_loss(
    bundle_s: FeatureBundle,
    bundle_t: FeatureBundle,
    targets,
    d,
    cfg: DistillConfig,
    proj: HintProjections | None = None,
) -> StudentLoss:
    """``CE + beta1 * mean(KL * d[:, N]) + beta2 * sum_i gated_kd(i)``.

    ``cfg`` must already be resolved. Per-sample distillers are gated per
    sample; batch-level ones are scaled by the batch mean of their column.
    The reported ``kl`` and ``kd`` are the gated terms before their factors.
    """
    if isinstance(d, Tensor):
        if d.requires_grad:
            raise UsageError("the distillation gate must be detached from the policy")
        d = d.data
    d = np.asarray(d, dtype=np.float64)
    n = len(bundle_s.block_features)
    if d.shape != (bundle_s.logits.shape[0], n + 1):
        raise ConfigError(f"gate shape {d.shape} does not cover {n + 1} spots")
    spots = cfg.spots if cfg.spots is not None else cfg.kind.default_spots(n)
    for s in spots:
        if not 1 <= s <= n:
            raise ConfigError(f"distillation spot {s} outside 1..{n}")

    ce = ad.cross_entropy(bundle_s.logits, targets)
    total = ce
    kl_value = 0.0
    if cfg.logit_spot_active:
        kl = ad.kl_divergence(bundle_s.logits, _const(bundle_t.logits), cfg.T, cfg.kl_t_squared)
        kl_term = ad.mean(ad.mul(kl, Tensor(d[:, n])))
        kl_value = kl_term.item()
        total = ad.add(total, ad.scale(kl_term, cfg.beta1))

    kd_value = 0.0
    beta2 = cfg.beta2 if cfg.beta2 is not None else cfg.kind.default_beta2
    for s in spots:
        f_s, f_t = bundle_s.block_features[s - 1], _const(bundle_t.block_features[s - 1])
        gate = d[:, s - 1]
        loss = spot_loss(cfg, s, f_s, f_t, proj)
        if cfg.kind.per_sample:
            term = ad.mean(ad.mul(loss, Tensor(gate)))
        else:
            term = ad.scale(loss, float(gate.mean()))
        kd_value += term.item()
        total = ad.add(total, ad.scale(term, beta2))
    return StudentLoss(total, ce.item(), kl_value, kd_value)
