"""Block-structured feed-forward networks and the adaption maps between two of them."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError

ACTIVATIONS = ("relu", "none")


@dataclass(frozen=True)
class BlockSpec:
    layers: tuple[tuple[int, str], ...]

    def __post_init__(self):
        if not self.layers:
            raise ConfigError("a block needs at least one layer")
        for width, act in self.layers:
            if int(width) <= 0:
                raise ConfigError(f"layer width must be positive, got {width}")
            if act not in ACTIVATIONS:
                raise ConfigError(f"unknown activation {act!r}")

    @property
    def width(self) -> int:
        return self.layers[-1][0]

    @classmethod
    def uniform(cls, width: int, depth: int = 1, activation: str = "relu") -> "BlockSpec":
        return cls(tuple((width, activation) for _ in range(depth)))


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    blocks: tuple[BlockSpec, ...]
    classifier_dim: int

    def __post_init__(self):
        if self.input_dim <= 0:
            raise ConfigError("input_dim must be positive")
        if len(self.blocks) < 1:
            raise ConfigError("a network needs at least one block")
        if self.classifier_dim < 2:
            raise ConfigError("classifier_dim must be at least 2")

    @property
    def num_blocks(self) -> int:
        return len(self.blocks)

    @property
    def block_widths(self) -> list[int]:
        return [b.width for b in self.blocks]

    @classmethod
    def mlp(cls, input_dim: int, widths, classes: int, depth: int = 1) -> "NetworkSpec":
        return cls(input_dim, tuple(BlockSpec.uniform(w, depth) for w in widths), classes)

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "blocks": [[[w, a] for w, a in b.layers] for b in self.blocks],
            "classifier_dim": self.classifier_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        unknown = set(d) - {"input_dim", "blocks", "classifier_dim"}
        if unknown:
            raise ConfigError(f"unknown network keys: {sorted(unknown)}")
        try:
            blocks = tuple(BlockSpec(tuple((int(w), str(a)) for w, a in b)) for b in d["blocks"])
            return cls(int(d["input_dim"]), blocks, int(d["classifier_dim"]))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"malformed network spec: {exc}") from exc


def he_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


@dataclass
class FeatureBundle:
    block_features: list[Tensor]
    logits: Tensor


class Network:
    """Parameters for ``classifier . B_N . ... . B_1``; softmax lives in the losses."""

    def __init__(self, spec: NetworkSpec, params: dict[str, Tensor]):
        self.spec = spec
        self.params = params
        self.mode = "train"
        self._check_shapes()

    @classmethod
    def build(cls, spec: NetworkSpec, seed: int) -> "Network":
        rng = np.random.default_rng(seed)
        params: dict[str, Tensor] = {}
        fan_in = spec.input_dim
        for i, block in enumerate(spec.blocks):
            for j, (width, _) in enumerate(block.layers):
                params[f"blocks.{i}.{j}.weight"] = Tensor(he_uniform(rng, fan_in, width), True)
                params[f"blocks.{i}.{j}.bias"] = Tensor(np.zeros(width), True)
                fan_in = width
        params["classifier.weight"] = Tensor(he_uniform(rng, fan_in, spec.classifier_dim), True)
        params["classifier.bias"] = Tensor(np.zeros(spec.classifier_dim), True)
        for name, t in params.items():
            t.name = name
        return cls(spec, params)

    def expected_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        fan_in = self.spec.input_dim
        for i, block in enumerate(self.spec.blocks):
            for j, (width, _) in enumerate(block.layers):
                shapes[f"blocks.{i}.{j}.weight"] = (fan_in, width)
                shapes[f"blocks.{i}.{j}.bias"] = (width,)
                fan_in = width
        shapes["classifier.weight"] = (fan_in, self.spec.classifier_dim)
        shapes["classifier.bias"] = (self.spec.classifier_dim,)
        return shapes

    def _check_shapes(self) -> None:
        expected = self.expected_shapes()
        if list(expected) != list(self.params):
            raise ShapeError(f"parameter names {list(self.params)} do not match spec")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ShapeError(f"{name}: expected {shape}, got {self.params[name].shape}")

    @property
    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self.params.values())

    def freeze(self) -> "Network":
        for p in self.params.values():
            p.requires_grad = False
        return self

    def unfreeze(self) -> "Network":
        for p in self.params.values():
            p.requires_grad = True
        return self

    def train(self) -> "Network":
        self.mode = "train"
        return self

    def eval(self) -> "Network":
        self.mode = "eval"
        return self

    def _param(self, name: str, constant: bool) -> Tensor:
        p = self.params[name]
        return ad.detach(p) if constant else p

    def block(self, i: int, x: Tensor, constant: bool = False) -> Tensor:
        """Apply block ``i`` (0-based). ``constant`` cuts gradient flow into the parameters."""
        for j, (_, act) in enumerate(self.spec.blocks[i].layers):
            x = ad.affine(x, self._param(f"blocks.{i}.{j}.weight", constant), self._param(f"blocks.{i}.{j}.bias", constant))
            if act == "relu":
                x = ad.relu(x)
        return x

    def head(self, x: Tensor, constant: bool = False) -> Tensor:
        return ad.affine(x, self._param("classifier.weight", constant), self._param("classifier.bias", constant))

    def forward_features(self, x, constant: bool = False) -> FeatureBundle:
        x = ad.as_tensor(x)
        if x.data.ndim != 2 or x.shape[1] != self.spec.input_dim:
            raise ShapeError(f"input shape {x.shape} does not match input_dim {self.spec.input_dim}")
        feats = []
        h = x
        for i in range(self.spec.num_blocks):
            h = self.block(i, h, constant)
            feats.append(h)
        return FeatureBundle(feats, self.head(h, constant))

    def logits(self, x) -> np.ndarray:
        """Plain numpy inference, no tape."""
        h = np.asarray(x, dtype=np.float64)
        for i, block in enumerate(self.spec.blocks):
            for j, (_, act) in enumerate(block.layers):
                h = h @ self.params[f"blocks.{i}.{j}.weight"].data + self.params[f"blocks.{i}.{j}.bias"].data
                if act == "relu":
                    h = np.maximum(h, 0.0)
        return h @ self.params["classifier.weight"].data + self.params["classifier.bias"].data

    def accuracy(self, x, y) -> float:
        return float(np.mean(self.logits(x).argmax(axis=1) == np.asarray(y)))

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, p in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


def build_network(spec: NetworkSpec, seed: int) -> Network:
    return Network.build(spec, seed)


def forward_features(net: Network, x) -> FeatureBundle:
    return net.forward_features(x)


def freeze(net: Network) -> Network:
    return net.freeze()


@dataclass
class AdaptionSet:
    """Affine maps teacher->student (``ts``) and student->teacher (``st``) at every block spot."""

    teacher_widths: list[int]
    student_widths: list[int]
    params: dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def build(cls, teacher: NetworkSpec, student: NetworkSpec, seed: int, init: str = "he") -> "AdaptionSet":
        if teacher.num_blocks != student.num_blocks:
            raise ConfigError(
                f"teacher has {teacher.num_blocks} blocks, student {student.num_blocks}; routing needs equal counts"
            )
        rng = np.random.default_rng(seed)
        tw, sw = teacher.block_widths, student.block_widths
        params = {}
        for i, (dt, ds) in enumerate(zip(tw, sw)):
            for direction, (src, dst) in (("ts", (dt, ds)), ("st", (ds, dt))):
                if init == "identity":
                    w = np.eye(src, dst)
                elif init == "he":
                    w = he_uniform(rng, src, dst)
                else:
                    raise ConfigError(f"unknown adaption init {init!r}")
                params[f"adapt.{i}.{direction}.weight"] = Tensor(w, True, f"adapt.{i}.{direction}.weight")
                params[f"adapt.{i}.{direction}.bias"] = Tensor(np.zeros(dst), True, f"adapt.{i}.{direction}.bias")
        return cls(list(tw), list(sw), params)

    @property
    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def apply(self, spot: int, direction: str, feat: Tensor) -> Tensor:
        """Map a feature at block spot ``spot`` (0-based) across networks."""
        if not 0 <= spot < len(self.teacher_widths):
            raise ConfigError(f"no adaption layer at spot {spot}")
        if direction not in ("ts", "st"):
            raise ConfigError(f"direction must be 'ts' or 'st', got {direction!r}")
        src = self.teacher_widths[spot] if direction == "ts" else self.student_widths[spot]
        if feat.data.ndim != 2 or feat.shape[1] != src:
            raise ShapeError(f"adapt spot {spot} {direction}: expected width {src}, got {feat.shape}")
        return ad.affine(feat, self.params[f"adapt.{spot}.{direction}.weight"], self.params[f"adapt.{spot}.{direction}.bias"])


def adapt(adaptions: AdaptionSet, spot: int, direction: str, feat: Tensor) -> Tensor:
    return adaptions.apply(spot, direction, feat)
