"""Dense float64 tensors with reverse-mode automatic differentiation.

Every primitive the reasoning network needs lives here: matrix multiply,
broadcasting add/mul, concatenation, tanh/relu/sigmoid, plain and segmented
softmax, gather/segment-sum, log, clip and dropout. Operations record a
backward closure onto the active :class:`Tape`; ``Tape.backward`` replays the
recording in reverse order and accumulates gradients into ``Tensor._grad``.

A tape and the tensors it references are confined to one thread. A
:class:`ParamStore` may be read by many forward passes concurrently but must
be written (optimizer step, checkpoint load) by one writer at a time; the
training loop enforces that alternation.
"""

from __future__ import annotations

import json
import math
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

CHECKPOINT_VERSION = 1

# Inputs to the natural log are clamped here so the loss stays finite at
# predictions of exactly 0 or 1.
LOG_FLOOR = 1e-12


class AutodiffError(Exception):
    """Base error for tensor-engine misuse."""


class ShapeMismatch(AutodiffError):
    """Operands do not conform for an operation."""

    def __init__(self, op: str, *shapes: tuple):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(s) for s in shapes)}")


class CheckpointError(AutodiffError):
    """Checkpoint file is malformed or does not match the model configuration."""


_FINITE_CHECKS = False


def set_finite_checks(enabled: bool) -> None:
    """Toggle per-op finiteness validation (slow; meant for tests/debugging)."""
    global _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)


class Tensor:
    """A dense float64 array plus gradient slot.

    ``values`` must never be mutated after an op has consumed the tensor;
    backward only writes ``_grad``.
    """

    __slots__ = ("values", "requires_grad", "_grad")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self._grad = None

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def grad(self):
        """Accumulated gradient; zeros if this tensor was unreachable from the loss."""
        if self._grad is not None:
            return self._grad
        if self.requires_grad:
            return np.zeros_like(self.values)
        return None

    def zero_grad(self) -> None:
        self._grad = None

    def _acc(self, g: np.ndarray) -> None:
        if self._grad is None:
            # Copy: g may alias an upstream gradient buffer.
            self._grad = np.array(g, dtype=np.float64)
        else:
            self._grad += g

    def item(self) -> float:
        if self.values.size != 1:
            raise AutodiffError(f"item: tensor has {self.values.size} elements")
        return float(self.values.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"


def constant(values) -> Tensor:
    return Tensor(values, requires_grad=False)


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of executed ops; backward walks it in exact reverse."""

    __slots__ = ("_nodes",)

    def __init__(self):
        self._nodes: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: Tensor) -> None:
        """Populate gradients of everything reachable from ``loss``.

        Forward values are left untouched. Tensors not on any path to the
        loss keep a zero gradient (see ``Tensor.grad``).
        """
        if loss.values.size != 1:
            raise AutodiffError(f"backward: loss must be scalar, got shape {loss.values.shape}")
        loss._grad = np.ones_like(loss.values)
        for out, backward_fn in reversed(self._nodes):
            g = out._grad
            if g is not None:
                backward_fn(g)


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _make(op: str, values: np.ndarray, requires_grad: bool,
          backward_fn: Callable[[np.ndarray], None] | None) -> Tensor:
    if _FINITE_CHECKS and not np.all(np.isfinite(values)):
        raise AutodiffError(f"{op}: produced non-finite values")
    out = Tensor(values, requires_grad=requires_grad)
    if requires_grad and backward_fn is not None:
        tape = _active_tape()
        if tape is not None:
            tape._nodes.append((out, backward_fn))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    av, bv = a.values, b.values
    if av.ndim == 0 or bv.ndim == 0 or av.shape[-1] != bv.shape[0]:
        raise ShapeMismatch("matmul", av.shape, bv.shape)
    values = av @ bv
    req = a.requires_grad or b.requires_grad

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            if av.ndim == 2 and bv.ndim == 2:
                a._acc(g @ bv.T)
            elif av.ndim == 2 and bv.ndim == 1:
                a._acc(np.outer(g, bv))
            elif av.ndim == 1 and bv.ndim == 2:
                a._acc(bv @ g)
            else:  # 1-D dot
                a._acc(g * bv)
        if b.requires_grad:
            if av.ndim == 2 and bv.ndim == 2:
                b._acc(av.T @ g)
            elif av.ndim == 2 and bv.ndim == 1:
                b._acc(g @ av)
            elif av.ndim == 1 and bv.ndim == 2:
                b._acc(np.outer(av, g))
            else:
                b._acc(g * av)

    return _make("matmul", values, req, backward_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        values = a.values + b.values
    except ValueError:
        raise ShapeMismatch("add", a.values.shape, b.values.shape) from None
    req = a.requires_grad or b.requires_grad

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            a._acc(_unbroadcast(g, a.values.shape))
        if b.requires_grad:
            b._acc(_unbroadcast(g, b.values.shape))

    return _make("add", values, req, backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    try:
        values = a.values * b.values
    except ValueError:
        raise ShapeMismatch("mul", a.values.shape, b.values.shape) from None
    req = a.requires_grad or b.requires_grad
    av, bv = a.values, b.values

    def backward_fn(g: np.ndarray) -> None:
        if a.requires_grad:
            a._acc(_unbroadcast(g * bv, av.shape))
        if b.requires_grad:
            b._acc(_unbroadcast(g * av, bv.shape))

    return _make("mul", values, req, backward_fn)


def affine(x: Tensor, scale, shift) -> Tensor:
    """``scale * x + shift`` where scale and shift are non-learned constants."""
    scale = np.asarray(scale, dtype=np.float64)
    shift = np.asarray(shift, dtype=np.float64)
    try:
        values = x.values * scale + shift
    except ValueError:
        raise ShapeMismatch("affine", x.values.shape, scale.shape, shift.shape) from None

    def backward_fn(g: np.ndarray) -> None:
        x._acc(_unbroadcast(g * scale, x.values.shape))

    return _make("affine", values, x.requires_grad, backward_fn)


def neg(x: Tensor) -> Tensor:
    return affine(x, -1.0, 0.0)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise AutodiffError("concat: need at least one tensor")
    ndim = tensors[0].values.ndim
    if any(t.values.ndim != ndim for t in tensors):
        raise ShapeMismatch("concat", *[t.values.shape for t in tensors])
    try:
        values = np.concatenate([t.values for t in tensors], axis=axis)
    except ValueError:
        raise ShapeMismatch("concat", *[t.values.shape for t in tensors]) from None
    req = any(t.requires_grad for t in tensors)
    ax = axis if axis >= 0 else ndim + axis
    sizes = [t.values.shape[ax] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g: np.ndarray) -> None:
        index = [slice(None)] * ndim
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                index[ax] = slice(start, stop)
                t._acc(g[tuple(index)])

    return _make("concat", values, req, backward_fn)


def tanh(x: Tensor) -> Tensor:
    values = np.tanh(x.values)

    def backward_fn(g: np.ndarray) -> None:
        x._acc(g * (1.0 - values * values))

    return _make("tanh", values, x.requires_grad, backward_fn)


def sigmoid(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        values = 1.0 / (1.0 + np.exp(-x.values))

    def backward_fn(g: np.ndarray) -> None:
        x._acc(g * values * (1.0 - values))

    return _make("sigmoid", values, x.requires_grad, backward_fn)


def relu(x: Tensor) -> Tensor:
    values = np.maximum(x.values, 0.0)
    mask = x.values > 0.0

    def backward_fn(g: np.ndarray) -> None:
        x._acc(g * mask)

    return _make("relu", values, x.requires_grad, backward_fn)


def softmax(x: Tensor, segments: np.ndarray | None = None,
            num_segments: int | None = None) -> Tensor:
    """Exp-normalize a 1-D tensor, with max-subtraction for stability.

    With ``segments`` given, normalization runs independently within each
    segment id (the "index set" of the distribution); an empty input is then
    legal and yields an empty result. Without segments the whole vector is
    one index set and must be nonempty.
    """
    xv = x.values
    if xv.ndim != 1:
        raise ShapeMismatch("softmax", xv.shape)
    if segments is None:
        if xv.size == 0:
            raise AutodiffError("softmax: empty index set")
        e = np.exp(xv - xv.max())
        values = e / e.sum()

        def backward_fn(g: np.ndarray) -> None:
            t = g * values
            x._acc(t - values * t.sum())

        return _make("softmax", values, x.requires_grad, backward_fn)

    seg = np.asarray(segments, dtype=np.int64)
    if num_segments is None:
        raise AutodiffError("softmax: num_segments required with segments")
    if seg.shape != xv.shape:
        raise ShapeMismatch("softmax", xv.shape, seg.shape)
    if xv.size == 0:
        return _make("softmax", np.zeros(0), x.requires_grad, lambda g: x._acc(g * 0.0))
    seg_max = np.full(num_segments, -np.inf)
    np.maximum.at(seg_max, seg, xv)
    e = np.exp(xv - seg_max[seg])
    denom = np.zeros(num_segments)
    np.add.at(denom, seg, e)
    values = e / denom[seg]

    def backward_fn(g: np.ndarray) -> None:
        t = g * values
        s = np.zeros(num_segments)
        np.add.at(s, seg, t)
        x._acc(t - values * s[seg])

    return _make("softmax", values, x.requires_grad, backward_fn)


def gather(x: Tensor, indices: np.ndarray) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)
    values = x.values[idx]

    def backward_fn(g: np.ndarray) -> None:
        gx = np.zeros_like(x.values)
        np.add.at(gx, idx, g)
        x._acc(gx)

    return _make("gather", values, x.requires_grad, backward_fn)


def segment_sum(x: Tensor, segments: np.ndarray, num_segments: int) -> Tensor:
    """Sum rows of ``x`` into ``num_segments`` buckets; empty buckets stay zero."""
    seg = np.asarray(segments, dtype=np.int64)
    if seg.shape != x.values.shape[:1]:
        raise ShapeMismatch("segment_sum", x.values.shape, seg.shape)
    values = np.zeros((num_segments,) + x.values.shape[1:])
    np.add.at(values, seg, x.values)

    def backward_fn(g: np.ndarray) -> None:
        x._acc(g[seg])

    return _make("segment_sum", values, x.requires_grad, backward_fn)


def reduce_sum(x: Tensor) -> Tensor:
    values = np.asarray(x.values.sum())

    def backward_fn(g: np.ndarray) -> None:
        x._acc(np.broadcast_to(g, x.values.shape))

    return _make("reduce_sum", values, x.requires_grad, backward_fn)


def reduce_mean(x: Tensor) -> Tensor:
    if x.values.size == 0:
        raise AutodiffError("reduce_mean: empty tensor")
    n = x.values.size
    values = np.asarray(x.values.sum() / n)

    def backward_fn(g: np.ndarray) -> None:
        x._acc(np.broadcast_to(g / n, x.values.shape))

    return _make("reduce_mean", values, x.requires_grad, backward_fn)


def log(x: Tensor) -> Tensor:
    """Natural log; inputs below LOG_FLOOR are clamped so the result is finite."""
    clamped = np.maximum(x.values, LOG_FLOOR)
    values = np.log(clamped)

    def backward_fn(g: np.ndarray) -> None:
        x._acc(g / clamped)

    return _make("log", values, x.requires_grad, backward_fn)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    values = np.clip(x.values, lo, hi)
    mask = (x.values >= lo) & (x.values <= hi)

    def backward_fn(g: np.ndarray) -> None:
        x._acc(g * mask)

    return _make("clip", values, x.requires_grad, backward_fn)


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Zero each element independently with probability ``p`` and rescale
    survivors by 1/(1-p); identity when not training or ``p`` is 0."""
    if not 0.0 <= p < 1.0:
        raise AutodiffError(f"dropout: p must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise AutodiffError("dropout: rng required in training mode")
    keep = (rng.random(x.values.shape) >= p) / (1.0 - p)
    values = x.values * keep

    def backward_fn(g: np.ndarray) -> None:
        x._acc(g * keep)

    return _make("dropout", values, x.requires_grad, backward_fn)


def broadcast_rows(x: Tensor, n: int) -> Tensor:
    """Tile a vector (d,) into a matrix (n, d)."""
    if x.values.ndim != 1:
        raise ShapeMismatch("broadcast_rows", x.values.shape)
    values = np.broadcast_to(x.values, (n, x.values.shape[0])).copy()

    def backward_fn(g: np.ndarray) -> None:
        x._acc(g.sum(axis=0))

    return _make("broadcast_rows", values, x.requires_grad, backward_fn)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    values = x.values.reshape(shape)

    def backward_fn(g: np.ndarray) -> None:
        x._acc(g.reshape(x.values.shape))

    return _make("reshape", values, x.requires_grad, backward_fn)


def narrow(x: Tensor, start: int, stop: int) -> Tensor:
    """Slice a 1-D tensor to [start:stop]."""
    if x.values.ndim != 1:
        raise ShapeMismatch("narrow", x.values.shape)
    values = x.values[start:stop].copy()

    def backward_fn(g: np.ndarray) -> None:
        gx = np.zeros_like(x.values)
        gx[start:stop] = g
        x._acc(gx)

    return _make("narrow", values, x.requires_grad, backward_fn)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

class ParamStore:
    """Named trainable tensors with deterministic iteration order.

    Initialization draws uniformly from [-1/sqrt(fan_in), +1/sqrt(fan_in)]
    using a generator seeded at construction, so a (seed, creation-order)
    pair fully determines the starting point.
    """

    def __init__(self, seed: int = 0):
        self._params: dict[str, Tensor] = {}
        self._rng = np.random.default_rng(seed)

    def create(self, name: str, shape: tuple, fan_in: int, gain: float = 1.0) -> Tensor:
        if name in self._params:
            raise AutodiffError(f"parameter {name!r} already exists")
        bound = gain / math.sqrt(max(1, fan_in))
        t = Tensor(self._rng.uniform(-bound, bound, shape), requires_grad=True)
        self._params[name] = t
        return t

    def put(self, name: str, values: np.ndarray) -> Tensor:
        if name in self._params:
            raise AutodiffError(f"parameter {name!r} already exists")
        t = Tensor(values, requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.values.copy() for name, t in self._params.items()}


def save_checkpoint(store: ParamStore, path, meta: dict | None = None) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "params": {
            name: {"shape": list(t.values.shape), "values": t.values.reshape(-1).tolist()}
            for name, t in store.items()
        },
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_checkpoint(path, expected_shapes: dict[str, tuple] | None = None) -> ParamStore:
    """Load a checkpoint, optionally validating names/shapes against a model config."""
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {payload.get('format_version')!r}")
    entries = payload.get("params")
    if not isinstance(entries, dict):
        raise CheckpointError("checkpoint missing 'params' table")
    store = ParamStore()
    for name, entry in entries.items():
        shape = tuple(entry["shape"])
        values = np.asarray(entry["values"], dtype=np.float64).reshape(shape)
        store.put(name, values)
    if expected_shapes is not None:
        have = {name: t.values.shape for name, t in store.items()}
        want = {name: tuple(shape) for name, shape in expected_shapes.items()}
        if have != want:
            missing = sorted(set(want) - set(have))
            extra = sorted(set(have) - set(want))
            wrong = sorted(n for n in set(want) & set(have) if want[n] != have[n])
            raise CheckpointError(
                f"checkpoint does not match model configuration "
                f"(missing={missing[:5]}, unexpected={extra[:5]}, wrong_shape={wrong[:5]})")
    return store


def checkpoint_meta(path) -> dict:
    with open(path) as fh:
        payload = json.load(fh)
    return payload.get("meta", {})


# ---------------------------------------------------------------------------
# numerical gradient verification
# ---------------------------------------------------------------------------

def gradient_check(forward: Callable[[], Tensor], params: ParamStore, epsilon: float,
                   max_coords_per_param: int = 2,
                   rng: np.random.Generator | None = None) -> float:
    """Compare analytic gradients against central differences.

    ``forward`` must be deterministic (dropout off, fixed inputs). Returns the
    max over sampled parameter coordinates of
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    """
    if epsilon <= 0:
        raise AutodiffError(f"gradient_check: epsilon must be positive, got {epsilon}")
    if rng is None:
        rng = np.random.default_rng(0)

    params.zero_grads()
    with Tape() as tape:
        loss = forward()
    if loss.values.size != 1:
        raise AutodiffError("gradient_check: forward must return a scalar loss")
    if not np.isfinite(loss.values).all():
        raise AutodiffError("gradient_check: non-finite loss")
    tape.backward(loss)
    analytic = {name: t.grad.reshape(-1).copy() for name, t in params.items()}

    worst = 0.0
    for name, t in params.items():
        flat = t.values.reshape(-1)
        n = flat.size
        if n <= max_coords_per_param:
            coords: Iterable[int] = range(n)
        else:
            coords = rng.choice(n, size=max_coords_per_param, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + epsilon
            lo_hi = float(forward().values.reshape(()))
            flat[i] = orig - epsilon
            lo_lo = float(forward().values.reshape(()))
            flat[i] = orig
            if not (math.isfinite(lo_hi) and math.isfinite(lo_lo)):
                raise AutodiffError("gradient_check: non-finite loss during perturbation")
            numeric = (lo_hi - lo_lo) / (2.0 * epsilon)
            a = analytic[name][i]
            rel = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, rel)
    return worst
