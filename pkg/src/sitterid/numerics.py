"""Dense float64 matrix primitives with reverse-mode gradient accumulation.

Forward math runs eagerly on numpy arrays. When a ``Tape`` is supplied, each
primitive records enough state to (a) push gradients back through the graph
and (b) replay the forward computation bit-identically. Everything is 2-D:
row vectors are ``1 x d`` matrices, scalars are ``1 x 1``.

Reductions use numpy's sequential/pairwise order, so results are
bit-reproducible across runs on one platform.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested primitive."""


class TapeError(RuntimeError):
    """The tape does not describe a usable scalar-valued computation."""


def as_matrix(x) -> np.ndarray:
    """Coerce to a finite 2-D float64 array; 1-D input becomes a row vector."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2:
        raise ShapeError(f"expected 1-D or 2-D data, got ndim={a.ndim}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix entries must be finite")
    return a


class Tensor:
    """A 2-D float64 matrix, optionally tracked on a tape.

    ``requires_grad`` marks trainable leaves; intermediate results become
    grad-tracked automatically when any input is. After ``backward`` the
    accumulated gradient sits in ``.grad`` (same shape as ``.value``).
    """

    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str = ""):
        self.value = as_matrix(value)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.value[0, 0])

    def __array__(self, dtype=None):
        return self.value if dtype is None else self.value.astype(dtype)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"


def _tensor(value: np.ndarray) -> Tensor:
    """Internal fast construction for op outputs (already 2-D float64)."""
    t = Tensor.__new__(Tensor)
    t.value = value
    t.grad = None
    t.requires_grad = False
    t.name = ""
    return t


class _Entry:
    """One recorded primitive: backward closure plus a forward replayer."""

    __slots__ = ("out", "inputs", "backward_fn", "forward_fn")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...],
                 backward_fn: Callable[[np.ndarray], None],
                 forward_fn: Callable[[], np.ndarray]):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.forward_fn = forward_fn


class Tape:
    """Ordered record of primitives for one forward pass.

    A tape is single-threaded and cheap; build a fresh one per loss
    evaluation. Replay is valid as long as the leaf values captured at
    record time have not been mutated in place (the optimizer in this
    package always rebinds, never mutates).
    """

    def __init__(self):
        self.entries: list[_Entry] = []
        self._watched: list[Tensor] = []

    def watch(self, *tensors: Tensor) -> None:
        """Register leaves that must receive a (possibly zero) gradient."""
        for t in tensors:
            t.requires_grad = True
            self._watched.append(t)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...],
               backward_fn: Callable[[np.ndarray], None],
               forward_fn: Callable[[], np.ndarray]) -> None:
        if any(t.requires_grad for t in inputs):
            out.requires_grad = True
            self.entries.append(_Entry(out, inputs, backward_fn, forward_fn))

    def replay(self) -> bool:
        """Re-run every recorded forward; True iff all outputs reproduce bit-identically."""
        for e in self.entries:
            fresh = e.forward_fn()
            if fresh.shape != e.out.value.shape or not np.array_equal(fresh, e.out.value):
                return False
        return True

    def backward(self, loss: Tensor, seed: float = 1.0) -> None:
        backward(self, loss, seed)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def backward(tape: Tape | None, loss: Tensor, seed: float = 1.0) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every tensor on the tape.

    Gradients are reset first, so each call yields gradients of exactly this
    loss. Watched leaves that the loss never touched end with zero gradients.
    """
    if loss.value.size != 1:
        raise TapeError(f"loss must be scalar, got shape {loss.shape}")
    if tape is None:
        raise TapeError("no tape recorded for this computation")
    touched = {id(loss): loss}
    for e in tape.entries:
        touched[id(e.out)] = e.out
        for t in e.inputs:
            touched[id(t)] = t
    for t in touched.values():
        t.grad = None
    for t in tape._watched:
        t.grad = None
    loss.grad = np.full_like(loss.value, seed)
    for e in reversed(tape.entries):
        if e.out.grad is not None:
            e.backward_fn(e.out.grad)
    for t in tape._watched:
        if t.grad is None:
            t.grad = np.zeros_like(t.value)
    for t in touched.values():
        if t.requires_grad and t.grad is None:
            t.grad = np.zeros_like(t.value)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a, b, tape: Tape | None = None) -> Tensor:
    """Standard matrix product ``a @ b``."""
    a, b = _wrap(a), _wrap(b)
    av, bv = a.value, b.value
    if av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {av.shape} @ {bv.shape}")
    out = _tensor(av @ bv)

    if tape is not None:
        def backward_fn(g):
            _accum(a, g @ bv.T)
            _accum(b, av.T @ g)
        tape.record(out, (a, b), backward_fn, lambda: av @ bv)
    return out


def matmul_t(a, b, tape: Tape | None = None) -> Tensor:
    """``a @ b.T`` without materializing the transpose on the tape."""
    a, b = _wrap(a), _wrap(b)
    av, bv = a.value, b.value
    if av.shape[1] != bv.shape[1]:
        raise ShapeError(f"matmul_t: column dims differ, {av.shape} vs {bv.shape}")
    out = _tensor(av @ bv.T)
    if tape is not None:
        def backward_fn(g):
            _accum(a, g @ bv)
            _accum(b, g.T @ av)
        tape.record(out, (a, b), backward_fn, lambda: av @ bv.T)
    return out


def transpose(a, tape: Tape | None = None) -> Tensor:
    a = _wrap(a)
    av = a.value
    out = _tensor(av.T.copy())
    if tape is not None:
        tape.record(out, (a,), lambda g: _accum(a, g.T), lambda: av.T.copy())
    return out


def add(a, b, tape: Tape | None = None) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    av, bv = a.value, b.value
    if av.shape != bv.shape:
        raise ShapeError(f"add: shapes differ, {av.shape} vs {bv.shape}")
    out = _tensor(av + bv)
    if tape is not None:
        def backward_fn(g):
            _accum(a, g)
            _accum(b, g)
        tape.record(out, (a, b), backward_fn, lambda: av + bv)
    return out


def sub(a, b, tape: Tape | None = None) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    av, bv = a.value, b.value
    if av.shape != bv.shape:
        raise ShapeError(f"sub: shapes differ, {av.shape} vs {bv.shape}")
    out = _tensor(av - bv)
    if tape is not None:
        def backward_fn(g):
            _accum(a, g)
            _accum(b, -g)
        tape.record(out, (a, b), backward_fn, lambda: av - bv)
    return out


def mul(a, b, tape: Tape | None = None) -> Tensor:
    """Elementwise (Hadamard) product of same-shape matrices."""
    a, b = _wrap(a), _wrap(b)
    av, bv = a.value, b.value
    if av.shape != bv.shape:
        raise ShapeError(f"mul: shapes differ, {av.shape} vs {bv.shape}")
    out = _tensor(av * bv)
    if tape is not None:
        def backward_fn(g):
            _accum(a, g * bv)
            _accum(b, g * av)
        tape.record(out, (a, b), backward_fn, lambda: av * bv)
    return out


def scale(a, c: float, tape: Tape | None = None) -> Tensor:
    """Multiply by a python constant (no gradient w.r.t. ``c``)."""
    a = _wrap(a)
    av, c = a.value, float(c)
    out = _tensor(av * c)
    if tape is not None:
        tape.record(out, (a,), lambda g: _accum(a, g * c), lambda: av * c)
    return out


def add_const(a, c: float, tape: Tape | None = None) -> Tensor:
    a = _wrap(a)
    av, c = a.value, float(c)
    out = _tensor(av + c)
    if tape is not None:
        tape.record(out, (a,), lambda g: _accum(a, g), lambda: av + c)
    return out


def relu(a, tape: Tape | None = None) -> Tensor:
    """max(0, x); subgradient 0 at the kink."""
    a = _wrap(a)
    av = a.value
    out = _tensor(np.maximum(av, 0.0))
    if tape is not None:
        mask = av > 0.0
        tape.record(out, (a,), lambda g: _accum(a, g * mask),
                    lambda: np.maximum(av, 0.0))
    return out


_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu_value(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x ** 3)))


def gelu(a, tape: Tape | None = None) -> Tensor:
    """Smooth GELU (tanh form); smoothness keeps finite-difference checks tight."""
    a = _wrap(a)
    av = a.value
    out = _tensor(_gelu_value(av))
    if tape is not None:
        def backward_fn(g):
            t = np.tanh(_GELU_C * (av + 0.044715 * av ** 3))
            du = _GELU_C * (1.0 + 3 * 0.044715 * av ** 2)
            _accum(a, g * (0.5 * (1.0 + t) + 0.5 * av * (1.0 - t ** 2) * du))
        tape.record(out, (a,), backward_fn, lambda: _gelu_value(av))
    return out


def softmax_rows(a, tape: Tape | None = None) -> Tensor:
    """Row-wise softmax with per-row max subtraction (overflow-safe)."""
    a = _wrap(a)
    av = a.value

    def fwd():
        z = av - av.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    s = fwd()
    out = _tensor(s)
    if tape is not None:
        def backward_fn(g):
            _accum(a, s * (g - (g * s).sum(axis=1, keepdims=True)))
        tape.record(out, (a,), backward_fn, fwd)
    return out


def layer_norm(x, gain, bias, eps: float = 1e-5, tape: Tape | None = None) -> Tensor:
    """Row-wise layer normalization: ``gain * (x - mean) / sqrt(var + eps) + bias``.

    ``gain`` and ``bias`` are ``1 x d`` row vectors applied to every row of ``x``.
    """
    x, gain, bias = _wrap(x), _wrap(gain), _wrap(bias)
    xv, gv, bv = x.value, gain.value, bias.value
    d = xv.shape[1]
    if gv.shape != (1, d) or bv.shape != (1, d):
        raise ShapeError(f"layer_norm: gain/bias must be 1x{d}, got {gv.shape}, {bv.shape}")

    def stats():
        mean = xv.mean(axis=1, keepdims=True)
        var = ((xv - mean) ** 2).mean(axis=1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        return (xv - mean) * inv, inv

    def fwd():
        xh, _ = stats()
        return gv * xh + bv

    xhat, inv = stats()
    out = _tensor(gv * xhat + bv)

    if tape is not None:
        def backward_fn(g):
            gx_hat = g * gv
            term = (d * gx_hat
                    - gx_hat.sum(axis=1, keepdims=True)
                    - xhat * (gx_hat * xhat).sum(axis=1, keepdims=True))
            _accum(x, (inv / d) * term)
            _accum(gain, (g * xhat).sum(axis=0, keepdims=True))
            _accum(bias, g.sum(axis=0, keepdims=True))
        tape.record(out, (x, gain, bias), backward_fn, fwd)
    return out


def l2_normalize_rows(a, tape: Tape | None = None) -> Tensor:
    """Scale each row to unit L2 norm. Raises on zero rows."""
    a = _wrap(a)
    av = a.value
    norms = np.linalg.norm(av, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("l2_normalize_rows: zero row cannot be normalized")
    y = av / norms
    out = _tensor(y)
    if tape is not None:
        def backward_fn(g):
            _accum(a, (g - y * (g * y).sum(axis=1, keepdims=True)) / norms)
        tape.record(out, (a,), backward_fn,
                    lambda: av / np.linalg.norm(av, axis=1, keepdims=True))
    return out


def mean_rows(a, tape: Tape | None = None) -> Tensor:
    """Mean over rows: ``n x d -> 1 x d``."""
    a = _wrap(a)
    av = a.value
    n = av.shape[0]
    out = _tensor(av.mean(axis=0, keepdims=True))
    if tape is not None:
        def backward_fn(g):
            _accum(a, np.repeat(g / n, n, axis=0))
        tape.record(out, (a,), backward_fn, lambda: av.mean(axis=0, keepdims=True))
    return out


def sum_all(a, tape: Tape | None = None) -> Tensor:
    """Sum of all entries as a ``1 x 1`` scalar."""
    a = _wrap(a)
    av = a.value
    out = _tensor(np.array([[av.sum()]]))
    if tape is not None:
        def backward_fn(g):
            _accum(a, np.full_like(av, g[0, 0]))
        tape.record(out, (a,), backward_fn, lambda: np.array([[av.sum()]]))
    return out


def slice_cols(a, start: int, stop: int, tape: Tape | None = None) -> Tensor:
    a = _wrap(a)
    av = a.value
    if not (0 <= start < stop <= av.shape[1]):
        raise ShapeError(f"slice_cols: [{start}:{stop}] invalid for {av.shape}")
    out = _tensor(av[:, start:stop].copy())
    if tape is not None:
        def backward_fn(g):
            full = np.zeros_like(av)
            full[:, start:stop] = g
            _accum(a, full)
        tape.record(out, (a,), backward_fn, lambda: av[:, start:stop].copy())
    return out


def concat_cols(parts: Sequence, tape: Tape | None = None) -> Tensor:
    parts = [_wrap(p) for p in parts]
    if not parts:
        raise ShapeError("concat_cols: need at least one part")
    rows = parts[0].value.shape[0]
    if any(p.value.shape[0] != rows for p in parts):
        raise ShapeError("concat_cols: row counts differ")
    values = [p.value for p in parts]
    out = _tensor(np.hstack(values))
    if tape is not None:
        widths = [v.shape[1] for v in values]
        def backward_fn(g):
            at = 0
            for p, w in zip(parts, widths):
                _accum(p, g[:, at:at + w])
                at += w
        tape.record(out, tuple(parts), backward_fn, lambda: np.hstack(values))
    return out


def concat_rows(parts: Sequence, tape: Tape | None = None) -> Tensor:
    parts = [_wrap(p) for p in parts]
    if not parts:
        raise ShapeError("concat_rows: need at least one part")
    cols = parts[0].value.shape[1]
    if any(p.value.shape[1] != cols for p in parts):
        raise ShapeError("concat_rows: column counts differ")
    values = [p.value for p in parts]
    out = _tensor(np.vstack(values))
    if tape is not None:
        heights = [v.shape[0] for v in values]
        def backward_fn(g):
            at = 0
            for p, h in zip(parts, heights):
                _accum(p, g[at:at + h, :])
                at += h
        tape.record(out, tuple(parts), backward_fn, lambda: np.vstack(values))
    return out


def gather_rows(a, indices, tape: Tape | None = None) -> Tensor:
    """Select rows by index (duplicates allowed); gradient scatter-adds."""
    a = _wrap(a)
    av = a.value
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1 or (idx.size and (idx.min() < 0 or idx.max() >= av.shape[0])):
        raise ShapeError(f"gather_rows: bad indices for {av.shape[0]} rows")
    out = _tensor(av[idx, :])
    if tape is not None:
        def backward_fn(g):
            full = np.zeros_like(av)
            np.add.at(full, idx, g)
            _accum(a, full)
        tape.record(out, (a,), backward_fn, lambda: av[idx, :])
    return out


def sum_cols(a, tape: Tape | None = None) -> Tensor:
    """Row sums: ``n x d -> n x 1``."""
    a = _wrap(a)
    av = a.value
    out = _tensor(av.sum(axis=1, keepdims=True))
    if tape is not None:
        def backward_fn(g):
            _accum(a, np.repeat(g, av.shape[1], axis=1))
        tape.record(out, (a,), backward_fn, lambda: av.sum(axis=1, keepdims=True))
    return out


def dot(a, b, tape: Tape | None = None) -> Tensor:
    """Inner product of two row vectors as a scalar tensor."""
    a, b = _wrap(a), _wrap(b)
    if a.rows != 1 or b.rows != 1 or a.cols != b.cols:
        raise ShapeError(f"dot: want matching row vectors, got {a.shape}, {b.shape}")
    return sum_all(mul(a, b, tape), tape)


def identity(n: int) -> np.ndarray:
    return np.eye(n, dtype=np.float64)
