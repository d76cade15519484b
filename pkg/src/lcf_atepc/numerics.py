"""Minimal reverse-mode autodiff over numpy arrays.

Every op takes :class:`Tensor` (or plain array, treated as a constant) inputs
and returns a new :class:`Tensor` that remembers how to push its gradient back
to its parents.  Arrays may carry leading batch axes; broadcast operands get
their gradients summed back down to their own shape.
"""
from __future__ import annotations

import json
import zlib
from collections import OrderedDict
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

CHECKPOINT_MAGIC = "#lcf-atepc-checkpoint"
CHECKPOINT_VERSION = 1
IGNORE_INDEX = -100
INIT_RANGE = 0.08


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


class Tensor:
    """A node in the computation graph."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward: Callable | None = None):
        self.value = np.asarray(value)
        if not np.all(np.isfinite(self.value)):
            raise NonFiniteError(f"non-finite values in {name or 'tensor'} of shape {self.value.shape}")
        self.requires_grad = requires_grad
        # only leaves keep a gradient buffer
        self.grad = np.zeros_like(self.value) if requires_grad and _backward is None else None
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def zero_grad(self) -> None:
        if self.requires_grad and self._backward is None:
            self.grad = np.zeros_like(self.value)

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        ``self`` must be a scalar.  Intermediate gradients are freed afterwards.
        """
        if self.value.size != 1:
            raise ShapeError("backward() needs a scalar output")
        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.value)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg


def _needs_grad(t) -> bool:
    return isinstance(t, Tensor) and t.requires_grad


def _topological_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if _needs_grad(p) and id(p) not in seen:
                stack.append((p, False))
    return order


def _value(x):
    return x.value if isinstance(x, Tensor) else np.asarray(x)


_grad_enabled = True


@contextmanager
def no_grad():
    """Build no graph inside the block (inference)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _make(value, parents: tuple, backward: Callable, name: str) -> Tensor:
    live = _grad_enabled and any(_needs_grad(p) for p in parents)
    return Tensor(value, requires_grad=live, name=name,
                  _parents=parents if live else (), _backward=backward if live else None)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    av, bv = _value(a), _value(b)
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {av.shape} @ {bv.shape}")

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape) if _needs_grad(a) else None
        gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape) if _needs_grad(b) else None
        return ga, gb

    return _make(av @ bv, (a, b), backward, "matmul")


def add(a, b) -> Tensor:
    av, bv = _value(a), _value(b)
    try:
        out = av + bv
    except ValueError as exc:
        raise ShapeError(f"add shape mismatch: {av.shape} + {bv.shape}") from exc

    def backward(g):
        return (_unbroadcast(g, av.shape) if _needs_grad(a) else None,
                _unbroadcast(g, bv.shape) if _needs_grad(b) else None)

    return _make(out, (a, b), backward, "add")


def add_bias(x, b) -> Tensor:
    """Add a bias vector along the last axis."""
    xv, bv = _value(x), _value(b)
    if bv.ndim != 1 or xv.shape[-1] != bv.shape[0]:
        raise ShapeError(f"bias of shape {bv.shape} does not fit {xv.shape}")
    return add(x, b)


def linear(x, w, b) -> Tensor:
    return add_bias(matmul(x, w), b)


def concat_cols(*xs) -> Tensor:
    vals = [_value(x) for x in xs]
    lead = {v.shape[:-1] for v in vals}
    if len(lead) != 1:
        raise ShapeError(f"concat_cols needs matching leading shapes, got {[v.shape for v in vals]}")
    cuts = np.cumsum([v.shape[-1] for v in vals])[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=-1))

    return _make(np.concatenate(vals, axis=-1), tuple(xs), backward, "concat_cols")


def hadamard_rows(x, weights) -> Tensor:
    """Elementwise product of ``x`` with a same-shaped (or broadcastable) weight array."""
    xv, wv = _value(x), _value(weights)
    try:
        out = xv * wv
    except ValueError as exc:
        raise ShapeError(f"hadamard shape mismatch: {xv.shape} * {wv.shape}") from exc
    if out.shape != xv.shape:
        raise ShapeError(f"weights {wv.shape} would broadcast {xv.shape} to {out.shape}")

    def backward(g):
        return (g * wv if _needs_grad(x) else None,
                _unbroadcast(g * xv, wv.shape) if _needs_grad(weights) else None)

    return _make(out, (x, weights), backward, "hadamard_rows")


def tanh(x) -> Tensor:
    out = np.tanh(_value(x))

    def backward(g):
        return (g * (1.0 - out * out),)

    return _make(out, (x,), backward, "tanh")


def scale(x, c: float) -> Tensor:
    def backward(g):
        return (g * c,)

    return _make(_value(x) * c, (x,), backward, "scale")


def transpose(x) -> Tensor:
    """Swap the last two axes."""
    def backward(g):
        return (np.swapaxes(g, -1, -2),)

    return _make(np.swapaxes(_value(x), -1, -2), (x,), backward, "transpose")


def softmax_rows(x, mask=None) -> Tensor:
    """Softmax over the last axis.

    ``mask`` is a boolean array broadcastable to ``x``; False entries get score
    -inf, i.e. exactly zero probability.  Every row must keep one entry.
    """
    xv = _value(x)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not np.all(np.broadcast_to(mask, xv.shape).any(axis=-1)):
            raise ShapeError("softmax row with every entry masked")
        scores = np.where(mask, xv, -np.inf)
    else:
        scores = xv
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (x,), backward, "softmax_rows")


def take_row(x, index: int) -> Tensor:
    """Select position ``index`` along the second-to-last axis."""
    xv = _value(x)

    def backward(g):
        full = np.zeros_like(xv)
        full[..., index, :] = g
        return (full,)

    return _make(xv[..., index, :], (x,), backward, "take_row")


def take_rows(x, count: int) -> Tensor:
    """The first ``count`` positions along the second-to-last axis."""
    xv = _value(x)

    def backward(g):
        full = np.zeros_like(xv)
        full[..., :count, :] = g
        return (full,)

    return _make(xv[..., :count, :], (x,), backward, "take_rows")


def embedding(table, ids) -> Tensor:
    """Gather rows of ``table`` by integer ``ids`` of any shape."""
    tv = _value(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= tv.shape[0]):
        raise IndexError(f"embedding id out of range [0, {tv.shape[0]})")

    def backward(g):
        full = np.zeros_like(tv)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, tv.shape[1]))
        return (full,)

    return _make(tv[ids], (table,), backward, "embedding")


def sum_squares(xs: Iterable) -> Tensor:
    xs = tuple(xs)
    total = sum(float(np.sum(_value(x) ** 2)) for x in xs)

    def backward(g):
        return tuple(2.0 * g * _value(x) for x in xs)

    return _make(np.array(total), xs, backward, "sum_squares")


def sum_all(x) -> Tensor:
    xv = _value(x)

    def backward(g):
        return (np.broadcast_to(g, xv.shape).copy(),)

    return _make(np.array(xv.sum()), (x,), backward, "sum_all")


def add_scalars(*xs) -> Tensor:
    def backward(g):
        return tuple(g for _ in xs)

    return _make(np.array(sum(float(_value(x)) for x in xs)), xs, backward, "add_scalars")


def cross_entropy(logits, targets, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Mean negative log-likelihood over rows whose target is not ``ignore_index``.

    ``logits`` has shape (..., C) and ``targets`` the matching leading shape.
    If every row is ignored the loss is 0 with zero gradient.
    """
    lv = _value(logits)
    targets = np.asarray(targets)
    if targets.shape != lv.shape[:-1]:
        raise ShapeError(f"targets {targets.shape} do not match logits {lv.shape}")
    flat = lv.reshape(-1, lv.shape[-1])
    tflat = targets.reshape(-1)
    keep = tflat != ignore_index
    if np.any((tflat[keep] < 0) | (tflat[keep] >= lv.shape[-1])):
        raise ValueError(f"target outside [0, {lv.shape[-1]})")
    count = int(keep.sum())
    shifted = flat - flat.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    rows = np.nonzero(keep)[0]
    if count:
        nll = log_z[rows] - shifted[rows, tflat[rows]]
        loss = float(nll.sum() / count)
    else:
        loss = 0.0

    def backward(g):
        grad = np.zeros_like(flat)
        if count:
            probs = np.exp(shifted[rows] - log_z[rows, None])
            probs[np.arange(count), tflat[rows]] -= 1.0
            grad[rows] = probs * (g / count)
        return (grad.reshape(lv.shape),)

    return _make(np.array(loss), (logits,), backward, "cross_entropy")


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def _name_rng(seed: int, name: str) -> np.random.Generator:
    # one stream per parameter name: init never depends on creation order
    return np.random.default_rng([seed, zlib.crc32(name.encode("utf-8"))])


class ParameterStore:
    """Named trainable tensors in insertion order."""

    def __init__(self, seed: int = 0, dtype=np.float64):
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self._params: OrderedDict[str, Tensor] = OrderedDict()

    def weight(self, name: str, shape: tuple) -> Tensor:
        value = _name_rng(self.seed, name).uniform(-INIT_RANGE, INIT_RANGE, size=shape)
        return self._register(name, value)

    def bias(self, name: str, size: int) -> Tensor:
        return self._register(name, np.zeros(size))

    def _register(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(value.astype(self.dtype), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.items())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def num_values(self) -> int:
        return sum(t.value.size for t in self._params.values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.value.copy() for k, t in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise CheckpointError(f"parameter mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, t in self._params.items():
            if state[k].shape != t.value.shape:
                raise CheckpointError(f"{k}: shape {state[k].shape} != {t.value.shape}")
            t.value = np.array(state[k], dtype=self.dtype)
            t.zero_grad()


def save_checkpoint(path, state: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write ``name shape csv-values`` records under a versioned header.

    Values use ``repr`` so float64 round-trips exactly.
    """
    lines = [f"{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}",
             "#meta " + json.dumps(meta or {}, sort_keys=True)]
    for name, value in state.items():
        shape = "x".join(str(s) for s in value.shape) or "scalar"
        csv = ",".join(repr(float(v)) for v in np.asarray(value, dtype=np.float64).reshape(-1))
        lines.append(f"{name} {shape} {csv}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    lines = text.split("\n")
    if not lines or lines[0] != f"{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}":
        raise CheckpointError(f"{path}: missing or unsupported checkpoint header")
    if len(lines) < 2 or not lines[1].startswith("#meta "):
        raise CheckpointError(f"{path}: missing meta line")
    try:
        meta = json.loads(lines[1][len("#meta "):])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: bad meta line") from exc
    state = {}
    for lineno, line in enumerate(lines[2:], start=3):
        if not line:
            continue
        parts = line.split(" ")
        if len(parts) != 3:
            raise CheckpointError(f"{path}:{lineno}: expected 'name shape values'")
        name, shape_s, csv = parts
        try:
            shape = () if shape_s == "scalar" else tuple(int(s) for s in shape_s.split("x"))
            values = np.array([float(v) for v in csv.split(",")], dtype=np.float64)
            state[name] = values.reshape(shape)
        except ValueError as exc:
            raise CheckpointError(f"{path}:{lineno}: malformed record for {name!r}") from exc
    return state, meta


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckEntry:
    name: str
    index: tuple
    analytic: float
    numeric: float

    @property
    def rel_error(self) -> float:
        return abs(self.analytic - self.numeric) / max(1.0, abs(self.numeric))


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry] = field(default_factory=list)
    tol: float = 1e-6

    @property
    def max_rel_error(self) -> float:
        return max((e.rel_error for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    @property
    def failures(self) -> list[GradCheckEntry]:
        return [e for e in self.entries if e.rel_error >= self.tol]

    def worst(self, k: int = 5) -> list[GradCheckEntry]:
        return sorted(self.entries, key=lambda e: e.rel_error, reverse=True)[:k]


def finite_difference_check(closure: Callable[[], Tensor], params: ParameterStore | Sequence[Tensor],
                            eps: float = 1e-5, tol: float = 1e-6, samples: int | None = None,
                            seed: int = 0) -> GradCheckReport:
    """Compare backprop gradients with central differences.

    ``closure`` rebuilds the graph from current parameter values and returns a
    scalar loss.  With ``samples`` set, that many coordinates are drawn
    uniformly (without replacement) over all parameter entries; otherwise every
    coordinate is checked.
    """
    tensors = params.tensors() if isinstance(params, ParameterStore) else list(params)
    for t in tensors:
        if t.value.dtype != np.float64:
            raise TypeError("finite_difference_check needs float64 parameters")
        t.zero_grad()
    closure().backward()
    analytic = [t.grad.copy() for t in tensors]

    coords = [(ti, idx) for ti, t in enumerate(tensors) for idx in np.ndindex(t.value.shape)]
    if samples is not None and samples < len(coords):
        pick = np.random.default_rng(seed).choice(len(coords), size=samples, replace=False)
        coords = [coords[i] for i in sorted(pick)]

    report = GradCheckReport(tol=tol)
    for ti, idx in coords:
        t = tensors[ti]
        orig = t.value[idx]
        t.value[idx] = orig + eps
        up = closure().item()
        t.value[idx] = orig - eps
        down = closure().item()
        t.value[idx] = orig
        numeric = (up - down) / (2.0 * eps)
        report.entries.append(GradCheckEntry(t.name or f"param{ti}", idx, float(analytic[ti][idx]), numeric))
    return report
