"""Reverse-mode automatic differentiation over dense float64 arrays.

Every differentiable operation returns a new :class:`Tensor` that remembers
its inputs and a closure mapping the output gradient to input gradients.
Tensors carry a monotonically increasing sequence number, so sorting the
reachable nodes by that number reproduces the order in which they were
appended to the tape; :func:`backward` walks that order in reverse.

Only the operators needed by the distillation engine are provided. They
are deliberately strict about shapes: broadcasting is explicit (``affine``,
``convex_combine``) rather than implicit.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, InvariantError, NumericError, ShapeError, UsageError

_seq = itertools.count()


class Tensor:
    """A float64 array plus the bookkeeping needed to differentiate through it."""

    __slots__ = ("data", "requires_grad", "parents", "backward_fn", "seq", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn = None
        self.seq = next(_seq)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self.backward_fn is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    return out


class GradMap:
    """Gradients keyed by tensor identity; absent tensors have zero gradient."""

    def __init__(self):
        self._grads: dict[int, np.ndarray] = {}
        self._refs: dict[int, Tensor] = {}

    def _accumulate(self, t: Tensor, g: np.ndarray) -> None:
        key = id(t)
        if key in self._grads:
            self._grads[key] = self._grads[key] + g
        else:
            self._grads[key] = g
            self._refs[key] = t

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._grads

    def __getitem__(self, t: Tensor) -> np.ndarray:
        return self._grads[id(t)]

    def get(self, t: Tensor, default=None):
        return self._grads.get(id(t), default)

    def __len__(self):
        return len(self._grads)

    def tensors(self) -> list[Tensor]:
        return list(self._refs.values())

    def restrict(self, tensors: Iterable[Tensor]) -> "GradMap":
        """Sub-map holding only the given tensors (those that have gradients)."""
        sub_map = GradMap()
        for t in tensors:
            if t in self:
                sub_map._grads[id(t)] = self[t]
                sub_map._refs[id(t)] = t
        return sub_map


class Tape:
    """The differentiable nodes reachable from a root, in append order."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        seen: dict[int, Tensor] = {}
        stack = [root]
        while stack:
            t = stack.pop()
            if id(t) in seen or not t.requires_grad:
                continue
            seen[id(t)] = t
            stack.extend(t.parents)
        return cls(sorted(seen.values(), key=lambda t: t.seq))

    def __len__(self):
        return len(self.nodes)


def backward(loss: Tensor) -> GradMap:
    """Accumulate d(loss)/d(t) for every requires-grad tensor reachable from ``loss``."""
    if loss.data.shape != ():
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    grads = GradMap()
    if not loss.requires_grad:
        return grads
    tape = Tape.from_root(loss)
    grads._accumulate(loss, np.ones((), dtype=np.float64))
    for node in reversed(tape.nodes):
        g = grads.get(node)
        if g is None or node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is not None and parent.requires_grad:
                grads._accumulate(parent, pg)
    return grads


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def grad(g):
        return g @ bd.T, ad.T @ g

    return _node(ad @ bd, (a, b), grad)


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight + bias`` with the bias broadcast over rows."""
    if x.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"affine shape mismatch: input {x.shape}, weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"affine bias {bias.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data

    def grad(g):
        return g @ wd.T, xd.T @ g, g.sum(axis=0)

    return _node(xd @ wd + bias.data, (x, weight, bias), grad)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got {x.shape}")
    return _node(x.data.T, (x,), lambda g: (g.T,))


def concat(a: Tensor, b: Tensor, axis: int = 1) -> Tensor:
    if axis != 1:
        raise UsageError("concat only supports axis=1")
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat batch mismatch: {a.shape} ++ {b.shape}")
    p = a.shape[1]
    return _node(np.concatenate([a.data, b.data], axis=1), (a, b), lambda g: (g[:, :p], g[:, p:]))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {src} to {tuple(shape)}") from exc
    return _node(out, (x,), lambda g: (g.reshape(src),))


def column(x: Tensor, j: int) -> Tensor:
    """Column ``j`` of a matrix as a vector."""
    if x.data.ndim != 2:
        raise ShapeError(f"column expects a matrix, got {x.shape}")
    src = x.shape

    def grad(g):
        full = np.zeros(src)
        full[:, j] = g
        return (full,)

    return _node(x.data[:, j].copy(), (x,), grad)


# ---------------------------------------------------------------- elementwise


def _binary_operand(a: Tensor, b, op: str):
    if isinstance(b, Tensor):
        if b.shape != a.shape and b.data.ndim != 0:
            raise ShapeError(f"{op} shape mismatch: {a.shape} vs {b.shape}")
        return b
    return Tensor(b)


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    return g if g.shape == shape else np.asarray(g.sum())


def add(a: Tensor, b) -> Tensor:
    a = as_tensor(a)
    b = _binary_operand(a, b, "add")
    bshape = b.shape
    return _node(a.data + b.data, (a, b), lambda g: (g, _reduce_to(g, bshape)))


def sub(a: Tensor, b) -> Tensor:
    a = as_tensor(a)
    b = _binary_operand(a, b, "sub")
    bshape = b.shape
    return _node(a.data - b.data, (a, b), lambda g: (g, -_reduce_to(g, bshape)))


def mul(a: Tensor, b) -> Tensor:
    a = as_tensor(a)
    b = _binary_operand(a, b, "mul")
    ad, bd, bshape = a.data, b.data, b.shape
    return _node(ad * bd, (a, b), lambda g: (g * bd, _reduce_to(g * ad, bshape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node(a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _node(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def abs_pow(a: Tensor, p: float) -> Tensor:
    """``|a| ** p`` for ``p >= 1`` (subgradient 0 at the origin)."""
    if p < 1:
        raise ConfigError(f"abs_pow needs p >= 1, got {p}")
    ad = a.data
    mag = np.abs(ad)

    def grad(g):
        return (g * p * mag ** (p - 1) * np.sign(ad),)

    return _node(mag**p, (a,), grad)


def elementwise(op: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by name: add, sub, mul, scale, relu."""
    if op == "relu":
        return relu(a)
    table = {"add": add, "sub": sub, "mul": mul, "scale": scale}
    if op not in table:
        raise UsageError(f"unknown elementwise op {op!r}")
    return table[op](a, b)


def convex_combine(a: Tensor, b: Tensor, w: Tensor) -> Tensor:
    """Per-row ``w * a + (1 - w) * b`` with ``w`` of shape ``[B]``."""
    if a.shape != b.shape or a.data.ndim != 2:
        raise ShapeError(f"convex_combine operands differ: {a.shape} vs {b.shape}")
    if w.shape != (a.shape[0],):
        raise ShapeError(f"convex_combine weights {w.shape} do not match batch {a.shape[0]}")
    wd = w.data
    if wd.size and (wd.min() < -1e-9 or wd.max() > 1 + 1e-9):
        raise InvariantError(f"mixing weights outside [0, 1]: [{wd.min()}, {wd.max()}]")
    wc = wd[:, None]
    ad, bd = a.data, b.data

    def grad(g):
        return g * wc, g * (1.0 - wc), (g * (ad - bd)).sum(axis=1)

    return _node(wc * ad + (1.0 - wc) * bd, (a, b, w), grad)


def straight_through(hard: np.ndarray, relaxed: Tensor) -> Tensor:
    """Forward value ``hard`` exactly; gradient passed unchanged to ``relaxed``."""
    hard = np.asarray(hard, dtype=np.float64)
    if hard.shape != relaxed.shape:
        raise ShapeError(f"straight_through shapes differ: {hard.shape} vs {relaxed.shape}")
    return _node(hard.copy(), (relaxed,), lambda g: (g,))


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data, requires_grad=False)


# ---------------------------------------------------------------- reductions


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    src = x.shape
    if axis is None:
        return _node(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, src).copy(),))
    out = x.data.sum(axis=axis)
    return _node(out, (x,), lambda g: (np.broadcast_to(np.expand_dims(g, axis), src).copy(),))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return scale(sum(x), 1.0 / n)


def normalize_rows(x: Tensor) -> Tensor:
    """L2-normalize each row; all-zero rows stay zero."""
    if x.data.ndim != 2:
        raise ShapeError(f"normalize_rows expects a matrix, got {x.shape}")
    norms = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    safe = np.where(norms > 0, norms, 1.0)
    y = np.where(norms > 0, x.data / safe, 0.0)

    def grad(g):
        gx = (g - y * (g * y).sum(axis=1, keepdims=True)) / safe
        return (np.where(norms > 0, gx, 0.0),)

    return _node(y, (x,), grad)


# ---------------------------------------------------------------- softmax & losses


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite input to {what}")


def _log_softmax_np(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_family(x: Tensor, variant: str = "softmax", axis: int = 1) -> Tensor:
    if axis != 1 or x.data.ndim != 2:
        raise UsageError("softmax_family works on [B, C] tensors along axis 1")
    if x.shape[1] < 1:
        raise ShapeError("softmax over an empty axis")
    _check_finite(x.data, variant)
    ls = _log_softmax_np(x.data)
    s = np.exp(ls)
    if variant == "softmax":
        return _node(s, (x,), lambda g: (s * (g - (g * s).sum(axis=1, keepdims=True)),))
    if variant == "log_softmax":
        return _node(ls, (x,), lambda g: (g - s * g.sum(axis=1, keepdims=True),))
    raise UsageError(f"unknown softmax variant {variant!r}")


def softmax(x: Tensor) -> Tensor:
    return softmax_family(x, "softmax")


def log_softmax(x: Tensor) -> Tensor:
    return softmax_family(x, "log_softmax")


def _check_targets(targets, batch: int, classes: int) -> np.ndarray:
    t = np.asarray(targets, dtype=np.int64)
    if t.shape != (batch,):
        raise ShapeError(f"targets shape {t.shape} does not match batch {batch}")
    if t.size and (t.min() < 0 or t.max() >= classes):
        raise IndexError(f"target out of range [0, {classes}): {t.min()}..{t.max()}")
    return t


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Batch-mean negative log-likelihood of integer class targets."""
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects [B, C] logits, got {logits.shape}")
    b, c = logits.shape
    t = _check_targets(targets, b, c)
    _check_finite(logits.data, "cross_entropy")
    ls = _log_softmax_np(logits.data)
    rows = np.arange(b)
    value = -ls[rows, t].sum() / b

    def grad(g):
        d = np.exp(ls)
        d[rows, t] -= 1.0
        return (d * (g / b),)

    return _node(np.asarray(value), (logits,), grad)


def kl_divergence(student_logits: Tensor, teacher_logits, T: float = 4.0, t_squared: bool = True) -> Tensor:
    """Per-sample ``KL(softmax(teacher/T) || softmax(student/T))``, optionally times ``T**2``.

    The teacher side is a constant: no gradient ever reaches it.
    """
    if T <= 0:
        raise ConfigError(f"softening temperature must be positive, got {T}")
    teacher = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits, float)
    if student_logits.shape != teacher.shape or teacher.ndim != 2:
        raise ShapeError(f"kl_divergence shape mismatch: {student_logits.shape} vs {teacher.shape}")
    _check_finite(student_logits.data, "kl_divergence")
    _check_finite(teacher, "kl_divergence")
    factor = T * T if t_squared else 1.0
    log_p = _log_softmax_np(teacher / T)
    p = np.exp(log_p)
    log_q = _log_softmax_np(student_logits.data / T)
    per_sample = factor * (p * (log_p - log_q)).sum(axis=1)

    def grad(g):
        q = np.exp(log_q)
        return (g[:, None] * (factor / T) * (q - p),)

    return _node(per_sample, (student_logits,), grad)


# ---------------------------------------------------------------- gradient oracle


def finite_diff_check(
    f: Callable, x: Tensor | Sequence[Tensor], eps: float = 1e-5, *, return_worst: bool = False
):
    """Max relative error between backward() and central differences.

    ``f(x)`` must return a scalar Tensor and be deterministic. ``x`` may be a
    single tensor or a list of tensors; each must have ``requires_grad``.
    Relative error per coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if eps <= 0:
        raise ConfigError("finite-difference step must be positive")
    xs = [x] if isinstance(x, Tensor) else list(x)
    loss = f(x)
    if not np.isfinite(loss.data):
        raise NumericError("finite_diff_check: f returned a non-finite value")
    grads = backward(loss)
    worst, where = 0.0, None
    for k, t in enumerate(xs):
        analytic = grads.get(t)
        analytic = np.zeros(t.shape) if analytic is None else analytic
        original = t.data
        flat = original.reshape(-1)
        for i in range(flat.size):
            bumped = flat.copy()
            bumped[i] = flat[i] + eps
            t.data = bumped.reshape(original.shape)
            f_plus = f(x).item()
            bumped[i] = flat[i] - eps
            t.data = bumped.reshape(original.shape)
            f_minus = f(x).item()
            t.data = original
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericError("finite_diff_check: f returned a non-finite value")
            numeric = (f_plus - f_minus) / (2 * eps)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            if err > worst:
                worst, where = err, (k, i)
    return (worst, where) if return_worst else worst
