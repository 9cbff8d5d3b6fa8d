"""Minimal reverse-mode autodiff on numpy arrays.

Tensors are 2-D throughout: batches/points are rows, channels are columns,
scalars are (1, 1). Ops take an explicit ``Tape`` as their first argument;
passing ``tape=None`` runs the forward math without recording, which is how
inference and evaluation avoid bookkeeping cost. A tape and the tensors it
tracks belong to a single thread for the duration of one forward/backward
pass.

Every op validates that its output is finite and raises ``NonFiniteError``
otherwise, so NaN/Inf never propagate silently.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared at an op boundary."""


class ShapeError(ValueError):
    """Operand shapes do not agree."""


def _check_finite(a: np.ndarray, ctx: str) -> np.ndarray:
    if not np.isfinite(a).all():
        raise NonFiniteError(f"non-finite values in {ctx}")
    return a


class Tensor:
    """A 2-D float array plus optional gradient storage."""

    __slots__ = ("data", "requires_grad", "grad", "name", "tracked")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        a = np.asarray(data)
        if a.dtype not in (np.float32, np.float64):
            a = a.astype(np.float32)
        if a.ndim == 0:
            a = a.reshape(1, 1)
        elif a.ndim == 1:
            a = a.reshape(1, -1)
        elif a.ndim != 2:
            raise ShapeError(f"tensors are 2-D, got shape {a.shape}")
        _check_finite(a, name or "tensor")
        self.data = a
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        # set when an op on a live tape produced this tensor from tracked inputs
        self.tracked = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def accumulate_grad(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.data.shape}, dtype={self.data.dtype})"


@dataclass
class Tape:
    """Ordered record of executed ops, replayed in reverse by ``backward``."""

    nodes: list = field(default_factory=list)

    def record(self, out: Tensor, back) -> None:
        self.nodes.append((out, back))

    def __len__(self):
        return len(self.nodes)


def _emit(tape: Tape | None, inputs: tuple[Tensor, ...], data: np.ndarray, back, ctx: str) -> Tensor:
    """Wrap an op result; record on the tape when a tracked input feeds it."""
    out = Tensor(_check_finite(data, ctx))
    if tape is not None and any(t.tracked for t in inputs):
        out.tracked = True
        tape.record(out, back)
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate gradients of every tracked tensor reachable from ``loss``.

    Tensors the loss does not depend on keep whatever their grad already is
    (training zeroes parameter grads before each forward).
    """
    if loss.data.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    loss.accumulate_grad(np.ones_like(loss.data))
    for out, back in reversed(tape.nodes):
        if out.grad is not None:
            back(out.grad)


# ---------------------------------------------------------------------------
# ops


def linear(tape, x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """y = x @ w + b for x (B, I), w (I, O), b (1, O)."""
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: x has {x.shape[1]} input channels, w expects {w.shape[0]}")
    if b.shape != (1, w.shape[1]):
        raise ShapeError(f"linear: bias shape {b.shape} != (1, {w.shape[1]})")
    y = x.data @ w.data + b.data

    def back(g):
        if x.tracked:
            x.accumulate_grad(g @ w.data.T)
        if w.tracked:
            w.accumulate_grad(x.data.T @ g)
        if b.tracked:
            b.accumulate_grad(g.sum(axis=0, keepdims=True))

    return _emit(tape, (x, w, b), y, back, "linear")


def point_shared_linear(tape, x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """The same affine map applied to each of N point rows (a point convolution)."""
    return linear(tape, x, w, b)


def tanh_op(tape, x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def back(g):
        if x.tracked:
            x.accumulate_grad(g * (1.0 - y * y))

    return _emit(tape, (x,), y, back, "tanh")


def relu_op(tape, x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0)

    def back(g):
        if x.tracked:
            x.accumulate_grad(g * (x.data > 0))

    return _emit(tape, (x,), y, back, "relu")


def concat(tape, parts: list[Tensor]) -> Tensor:
    """Concatenate along the channel axis."""
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise ShapeError(f"concat: differing row counts {sorted(rows)}")
    y = np.concatenate([p.data for p in parts], axis=1)
    offsets = np.cumsum([0] + [p.shape[1] for p in parts])

    def back(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.tracked:
                p.accumulate_grad(g[:, lo:hi])

    return _emit(tape, tuple(parts), y, back, "concat")


def slice_cols(tape, x: Tensor, lo: int, hi: int) -> Tensor:
    if not (0 <= lo < hi <= x.shape[1]):
        raise ShapeError(f"slice [{lo}:{hi}] outside width {x.shape[1]}")
    y = x.data[:, lo:hi].copy()

    def back(g):
        if x.tracked:
            full = np.zeros_like(x.data)
            full[:, lo:hi] = g
            x.accumulate_grad(full)

    return _emit(tape, (x,), y, back, "slice_cols")


def tile_rows(tape, v: Tensor, n: int) -> Tensor:
    """Broadcast a (1, C) vector to (n, C)."""
    if v.shape[0] != 1:
        raise ShapeError(f"tile_rows expects a single row, got {v.shape}")
    y = np.repeat(v.data, n, axis=0)

    def back(g):
        if v.tracked:
            v.accumulate_grad(g.sum(axis=0, keepdims=True))

    return _emit(tape, (v,), y, back, "tile_rows")


def max_pool_points(tape, x: Tensor) -> tuple[Tensor, np.ndarray]:
    """Per-channel max over the point rows.

    Returns the pooled (1, C) tensor and the argmax row per channel; ties go
    to the smallest row index, and the backward pass routes each channel's
    gradient only to that row.
    """
    if x.shape[0] < 1:
        raise ShapeError("max_pool_points on empty input")
    arg = x.data.argmax(axis=0)
    y = x.data[arg, np.arange(x.shape[1])].reshape(1, -1)

    def back(g):
        if x.tracked:
            full = np.zeros_like(x.data)
            full[arg, np.arange(x.shape[1])] = g[0]
            x.accumulate_grad(full)

    return _emit(tape, (x,), y, back, "max_pool_points"), arg


def dropout(tape, x: Tensor, p: float, rng: np.random.Generator, train: bool) -> Tensor:
    """Zero each feature with probability p and rescale survivors by 1/(1-p)."""
    if not train or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)

    def back(g):
        if x.tracked:
            x.accumulate_grad(g * keep)

    return _emit(tape, (x,), x.data * keep, back, "dropout")


def point_norm(tape, x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize each channel over the point rows, then scale and shift.

    Per-point statistics replace batch statistics here: a recursive pass
    works on one shape at a time, so the point axis is the only one with
    meaningful population moments. With fewer than 2 rows there is nothing
    to standardize and only the affine part applies.
    """
    n = x.shape[0]
    if n < 2:
        y = x.data * gamma.data + beta.data

        def back_affine(g):
            if x.tracked:
                x.accumulate_grad(g * gamma.data)
            if gamma.tracked:
                gamma.accumulate_grad((g * x.data).sum(axis=0, keepdims=True))
            if beta.tracked:
                beta.accumulate_grad(g.sum(axis=0, keepdims=True))

        return _emit(tape, (x, gamma, beta), y, back_affine, "point_norm")

    mu = x.data.mean(axis=0, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=0, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    y = xhat * gamma.data + beta.data

    def back(g):
        if gamma.tracked:
            gamma.accumulate_grad((g * xhat).sum(axis=0, keepdims=True))
        if beta.tracked:
            beta.accumulate_grad(g.sum(axis=0, keepdims=True))
        if x.tracked:
            gxhat = g * gamma.data
            dvar = (gxhat * centered).sum(axis=0, keepdims=True) * (-0.5) * inv**3
            dmu = (-gxhat * inv).sum(axis=0, keepdims=True) + dvar * (-2.0 / n) * centered.sum(
                axis=0, keepdims=True
            )
            x.accumulate_grad(gxhat * inv + dvar * 2.0 / n * centered + dmu / n)

    return _emit(tape, (x, gamma, beta), y, back, "point_norm")


def softmax_cross_entropy(tape, logits: Tensor, targets) -> Tensor:
    """Mean of -log softmax(logits)[target] over the batch rows."""
    ids = np.asarray(targets, dtype=np.int64).reshape(-1)
    b, k = logits.shape
    if len(ids) != b:
        raise ShapeError(f"{b} logit rows but {len(ids)} targets")
    if ids.min(initial=0) < 0 or ids.max(initial=0) >= k:
        raise ValueError(f"target out of range [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    losses = logsum[:, 0] - z[np.arange(b), ids]
    y = np.array([[losses.mean()]], dtype=logits.dtype)

    def back(g):
        if logits.tracked:
            soft = np.exp(z - logsum)
            soft[np.arange(b), ids] -= 1.0
            logits.accumulate_grad(soft * (g[0, 0] / b))

    return _emit(tape, (logits,), y, back, "softmax_cross_entropy")


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    """Plain softmax on raw rows (inference-side helper, no grad)."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def mse(tape, pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared difference over all entries."""
    if pred.shape != target.shape:
        raise ShapeError(f"mse: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    y = np.array([[np.mean(diff * diff)]], dtype=pred.dtype)

    def back(g):
        scale_ = 2.0 * g[0, 0] / diff.size
        if pred.tracked:
            pred.accumulate_grad(scale_ * diff)
        if target.tracked:
            target.accumulate_grad(-scale_ * diff)

    return _emit(tape, (pred, target), y, back, "mse")


def masked_mse(tape, pred: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean squared difference over the entries selected by a 0/1 mask."""
    t = np.asarray(target, dtype=pred.dtype).reshape(pred.shape)
    m = np.asarray(mask, dtype=pred.dtype).reshape(pred.shape)
    count = m.sum()
    if count <= 0:
        raise ValueError("empty mask")
    diff = (pred.data - t) * m
    y = np.array([[(diff * diff).sum() / count]], dtype=pred.dtype)

    def back(g):
        if pred.tracked:
            pred.accumulate_grad(2.0 * g[0, 0] / count * diff)

    return _emit(tape, (pred,), y, back, "masked_mse")


def add_n(tape, xs: list[Tensor]) -> Tensor:
    """Elementwise sum of same-shape tensors."""
    if not xs:
        raise ShapeError("add_n of nothing")
    if len({x.shape for x in xs}) != 1:
        raise ShapeError("add_n: shapes differ")
    y = xs[0].data.copy()
    for x in xs[1:]:
        y += x.data

    def back(g):
        for x in xs:
            if x.tracked:
                x.accumulate_grad(g)

    return _emit(tape, tuple(xs), y, back, "add_n")


def scale(tape, x: Tensor, c: float) -> Tensor:
    y = x.data * c

    def back(g):
        if x.tracked:
            x.accumulate_grad(g * c)

    return _emit(tape, (x,), y, back, "scale")


def zero_scalar(dtype=np.float32) -> Tensor:
    return Tensor(np.zeros((1, 1), dtype=dtype))


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """First/second moment buffers plus the shared step counter."""

    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: AdamState) -> None:
    """One Adam update with bias correction; missing grads count as zero."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeError(f"grad shape {g.shape} != param shape {p.data.shape} for {name}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        _check_finite(p.data, f"adam update of {name}")


# ---------------------------------------------------------------------------
# checkpoint format: magic "PNCKPT1", then a table of named float32 arrays
# (parameters and Adam moments), then the step counter. Bit-exact round trip.

CHECKPOINT_MAGIC = b"PNCKPT1"


def _write_entry(f, name: str, a: np.ndarray):
    raw = name.encode("utf-8")
    f.write(struct.pack("<H", len(raw)))
    f.write(raw)
    f.write(struct.pack("<B", a.ndim))
    f.write(struct.pack(f"<{a.ndim}I", *a.shape))
    f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def _read_entry(f):
    (nlen,) = struct.unpack("<H", f.read(2))
    name = f.read(nlen).decode("utf-8")
    (ndim,) = struct.unpack("<B", f.read(1))
    shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
    count = int(np.prod(shape)) if ndim else 1
    data = np.frombuffer(f.read(4 * count), dtype="<f4").reshape(shape)
    return name, data.copy()


def save_checkpoint(path, params: dict[str, Tensor], state: AdamState) -> None:
    entries = [("param/" + k, t.data) for k, t in params.items()]
    entries += [("adam_m/" + k, state.m[k]) for k in params if k in state.m]
    entries += [("adam_v/" + k, state.v[k]) for k in params if k in state.v]
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(entries)))
        for name, a in entries:
            _write_entry(f, name, a)
        f.write(struct.pack("<q", state.step))


class CheckpointError(ValueError):
    pass


def load_checkpoint(path):
    """Read back (param arrays, AdamState) from ``save_checkpoint`` output."""
    with open(path, "rb") as f:
        if f.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic, not a checkpoint")
        (count,) = struct.unpack("<I", f.read(4))
        params: dict[str, np.ndarray] = {}
        state = AdamState()
        for _ in range(count):
            name, a = _read_entry(f)
            group, _, key = name.partition("/")
            if group == "param":
                params[key] = a
            elif group == "adam_m":
                state.m[key] = a
            elif group == "adam_v":
                state.v[key] = a
            else:
                raise CheckpointError(f"{path}: unknown entry group {group!r}")
        (state.step,) = struct.unpack("<q", f.read(8))
    return params, state
