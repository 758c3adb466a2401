"""Dense-tensor kernel with reverse-mode autodiff on an explicit tape.

Everything numeric in this package flows through the ops defined here.
Tensors are plain row-major numpy buffers (float32 in production, float64
for gradient-check recomputation); the tape records one entry per op in
execution order, so reversing it is already a valid topological order for
backpropagation.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager

import numpy as np


class ShapeError(ValueError):
    pass


class NumericsError(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# global switches and counters

_state = threading.local()


def _tls():
    if not hasattr(_state, "tape"):
        _state.tape = None
        _state.check_finite = False
        _state.count_macs = False
        _state.macs = 0
    return _state


def set_check_finite(on: bool) -> None:
    """Fail-fast mode: every op output is checked for NaN/Inf."""
    _tls().check_finite = bool(on)


# Live-buffer accounting. CPython refcounting frees tensors as soon as the
# last reference drops, so current/peak track real residency closely enough
# for the constant-memory streaming assertions.
_alloc_lock = threading.Lock()
_alloc = {"live": 0, "peak": 0}


def _alloc_add(nbytes: int) -> None:
    with _alloc_lock:
        _alloc["live"] += nbytes
        if _alloc["live"] > _alloc["peak"]:
            _alloc["peak"] = _alloc["live"]


def _alloc_sub(nbytes: int) -> None:
    with _alloc_lock:
        _alloc["live"] -= nbytes


def live_bytes() -> int:
    return _alloc["live"]


def peak_bytes() -> int:
    return _alloc["peak"]


def reset_peak() -> None:
    with _alloc_lock:
        _alloc["peak"] = _alloc["live"]


@contextmanager
def count_macs():
    """Count multiply-accumulate ops of every matmul executed in the block."""
    s = _tls()
    prev_on, prev_n = s.count_macs, s.macs
    s.count_macs, s.macs = True, 0
    box = {}
    try:
        yield box
    finally:
        box["macs"] = s.macs
        s.count_macs, s.macs = prev_on, prev_n


# ---------------------------------------------------------------------------
# tensors and the tape


class Tensor:
    """Dense n-d array plus an optional gradient buffer of the same shape."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_nbytes", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if not isinstance(data, np.ndarray):
            data = np.asarray(data, dtype=np.float32)
        self.data = data
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._nbytes = data.nbytes
        _alloc_add(self._nbytes)

    def __del__(self):
        try:
            _alloc_sub(self._nbytes)
        except Exception:
            pass

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(())[()])

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(f"grad shape {g.shape} != data shape {self.data.shape}")
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad" if self.requires_grad else ""
        nm = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}{flag}{nm})"


class Tape:
    """Ordered op record: (output, inputs, backward rule), execution order."""

    def __init__(self):
        self.entries: list[tuple[Tensor, tuple[Tensor, ...], object]] = []

    def __len__(self):
        return len(self.entries)

    def append(self, out: Tensor, inputs: tuple[Tensor, ...], bwd) -> None:
        self.entries.append((out, inputs, bwd))


@contextmanager
def record(tape: Tape):
    """Make ops inside the block record onto `tape`."""
    s = _tls()
    prev = s.tape
    s.tape = tape
    try:
        yield tape
    finally:
        s.tape = prev


@contextmanager
def no_grad():
    s = _tls()
    prev = s.tape
    s.tape = None
    try:
        yield
    finally:
        s.tape = prev


def _finish(op_name: str, out_data: np.ndarray, inputs: tuple[Tensor, ...], bwd) -> Tensor:
    """Wrap an op result: finiteness check, tape recording, grad flagging."""
    s = _tls()
    if s.check_finite and not np.all(np.isfinite(out_data)):
        raise NumericsError(f"non-finite values in output of {op_name}")
    needs = s.tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        s.tape.append(out, inputs, bwd)
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate .grad of every requires_grad tensor reachable from `loss`.

    Walks the tape once in reverse; entries whose outputs received no
    gradient are skipped, so detached branches cost nothing.
    """
    if loss.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    loss.accumulate_grad(np.ones_like(loss.data))
    for out, inputs, bwd in reversed(tape.entries):
        if out.grad is None:
            continue
        bwd(out.grad)


def detach(x: Tensor) -> Tensor:
    """Same data, no gradient history: a hard barrier for backprop."""
    return Tensor(x.data, requires_grad=False)


# ---------------------------------------------------------------------------
# creation helpers


def param(data: np.ndarray, name: str | None = None) -> Tensor:
    return Tensor(np.ascontiguousarray(data), requires_grad=True, name=name)


def constant(data, dtype=np.float32) -> Tensor:
    return Tensor(np.ascontiguousarray(np.asarray(data, dtype=dtype)))


def zeros(shape, dtype=np.float32, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-d x 2-d, stacked x stacked (equal leading dims), or n-d x 2-d weight."""
    ash, bsh = a.shape, b.shape
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {ash} x {bsh}")
    if ash[-1] != bsh[-2]:
        raise ShapeError(f"matmul inner dims differ: {ash} x {bsh}")
    if b.ndim == 2:
        stacked = False
    elif a.ndim == b.ndim and ash[:-2] == bsh[:-2]:
        stacked = True
    else:
        raise ShapeError(f"matmul leading dims differ: {ash} x {bsh}")

    s = _tls()
    if s.count_macs:
        batch = math.prod(ash[:-2]) if a.ndim > 2 else 1
        s.macs += batch * ash[-2] * ash[-1] * bsh[-1]

    out_data = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2) if stacked else g @ b.data.T
            a.accumulate_grad(np.ascontiguousarray(ga))
        if b.requires_grad:
            if stacked:
                gb = np.swapaxes(a.data, -1, -2) @ g
            else:
                # weight shared across leading dims: fold them into rows
                a2 = a.data.reshape(-1, ash[-1])
                g2 = g.reshape(-1, bsh[-1])
                gb = a2.T @ g2
            b.accumulate_grad(np.ascontiguousarray(gb))

    return _finish("matmul", out_data, (a, b), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shapes differ: {a.shape} vs {b.shape}")
    out_data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g)

    return _finish("add", out_data, (a, b), bwd)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Broadcast `b` over the leading axes of `x` (trailing shapes must match)."""
    if b.ndim > x.ndim or x.shape[x.ndim - b.ndim:] != b.shape:
        raise ShapeError(f"bias shape {b.shape} does not match trailing dims of {x.shape}")
    lead = x.ndim - b.ndim
    out_data = x.data + b.data

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g)
        if b.requires_grad:
            gb = g.sum(axis=tuple(range(lead))) if lead else g
            b.accumulate_grad(np.ascontiguousarray(gb))

    return _finish("add_bias", out_data, (x, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes differ: {a.shape} vs {b.shape}")
    out_data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * b.data)
        if b.requires_grad:
            b.accumulate_grad(g * a.data)

    return _finish("mul", out_data, (a, b), bwd)


def scale(x: Tensor, c: float) -> Tensor:
    out_data = x.data * x.data.dtype.type(c)

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g * x.data.dtype.type(c))

    return _finish("scale", out_data, (x,), bwd)


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(x: Tensor) -> Tensor:
    """tanh-form GELU; backward differentiates the same form exactly."""
    u = _GELU_C * (x.data + _GELU_A * x.data**3)
    t = np.tanh(u)
    out_data = (0.5 * x.data * (1.0 + t)).astype(x.data.dtype)

    def bwd(g):
        if x.requires_grad:
            du = _GELU_C * (1.0 + 3.0 * _GELU_A * x.data**2)
            d = 0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du
            x.accumulate_grad((g * d).astype(x.data.dtype))

    return _finish("gelu", out_data, (x,), bwd)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis, stabilized by per-row max subtraction."""
    m = x.data.max(axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    p = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        if x.requires_grad:
            gx = p * (g - (g * p).sum(axis=-1, keepdims=True))
            x.accumulate_grad(gx.astype(x.data.dtype))

    return _finish("softmax_rows", p.astype(x.data.dtype), (x,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be > 0")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"gain/bias must be ({d},), got {gain.shape}/{bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out_data = (xhat * gain.data + bias.data).astype(x.data.dtype)

    def bwd(g):
        if gain.requires_grad:
            gain.accumulate_grad(
                np.ascontiguousarray((g * xhat).sum(axis=tuple(range(x.ndim - 1))))
            )
        if bias.requires_grad:
            bias.accumulate_grad(
                np.ascontiguousarray(g.sum(axis=tuple(range(x.ndim - 1))))
            )
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (
                gh
                - gh.mean(axis=-1, keepdims=True)
                - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
            x.accumulate_grad(gx.astype(x.data.dtype))

    return _finish("layer_norm", out_data, (x, gain, bias), bwd)


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean negative log-softmax of the target class over unmasked rows.

    `logits` is (n, V); `targets` an int vector of length n; `mask` an
    optional boolean vector selecting the rows that contribute. exp() of
    the result is the perplexity of the selection.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects 2-d logits, got {logits.shape}")
    n, v = logits.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (n,):
        raise ShapeError(f"targets shape {targets.shape} != ({n},)")
    if targets.min(initial=0) < 0 or targets.max(initial=0) >= v:
        raise ValueError("target class out of range")
    if mask is None:
        sel = np.ones(n, dtype=bool)
    else:
        sel = np.asarray(mask, dtype=bool)
        if sel.shape != (n,):
            raise ShapeError(f"mask shape {sel.shape} != ({n},)")
    k = int(sel.sum())
    if k == 0:
        raise ValueError("cross_entropy mask selects no positions")

    m = logits.data.max(axis=-1, keepdims=True)
    z = logits.data - m
    lse = np.log(np.exp(z).sum(axis=-1)) + m[:, 0]
    nll = lse - logits.data[np.arange(n), targets]
    out_data = np.asarray(nll[sel].mean(), dtype=logits.data.dtype)

    def bwd(g):
        if logits.requires_grad:
            p = np.exp(z - np.log(np.exp(z).sum(axis=-1, keepdims=True)))
            p[np.arange(n), targets] -= 1.0
            p[~sel] = 0.0
            logits.accumulate_grad((p * (float(g) / k)).astype(logits.data.dtype))

    return _finish("cross_entropy", out_data, (logits,), bwd)


def embedding(table: Tensor, ids) -> Tensor:
    """Row gather: out[..., :] = table[ids[...], :]."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError(
            f"token id out of range [0, {table.shape[0]}): "
            f"min={ids.min()}, max={ids.max()}"
        )
    out_data = table.data[ids]

    def bwd(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
            table.accumulate_grad(gt)

    return _finish("embedding", out_data, (table,), bwd)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat of empty list")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t.accumulate_grad(np.ascontiguousarray(g[tuple(sl)]))

    return _finish("concat", out_data, tuple(tensors), bwd)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, stop)
    out_data = np.ascontiguousarray(x.data[tuple(sl)])

    def bwd(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[tuple(sl)] = g
            x.accumulate_grad(gx)

    return _finish("slice_axis", out_data, (x,), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    out_data = x.data.reshape(shape)

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g.reshape(x.data.shape))

    return _finish("reshape", out_data, (x,), bwd)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out_data = np.ascontiguousarray(x.data.transpose(axes))

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(np.ascontiguousarray(g.transpose(inv)))

    return _finish("transpose", out_data, (x,), bwd)


def broadcast_batch(x: Tensor, n: int) -> Tensor:
    """Tile `x` along a new leading axis of size n; grads sum back over it."""
    out_data = np.ascontiguousarray(np.broadcast_to(x.data, (n,) + x.shape))

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(np.ascontiguousarray(g.sum(axis=0)))

    return _finish("broadcast_batch", out_data, (x,), bwd)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate == 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate {rate} outside [0, 1)")
    if rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad((g * keep).astype(x.data.dtype))

    return _finish("dropout", (x.data * keep).astype(x.data.dtype), (x,), bwd)


def sum_all(x: Tensor) -> Tensor:
    out_data = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(np.full_like(x.data, float(g)))

    return _finish("sum_all", out_data, (x,), bwd)


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    out_data = np.asarray(x.data.mean(), dtype=x.data.dtype)

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(np.full_like(x.data, float(g) / n))

    return _finish("mean_all", out_data, (x,), bwd)
