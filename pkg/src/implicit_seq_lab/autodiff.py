"""Reverse-mode autodiff over numpy arrays.

A ``Tensor`` wraps an ndarray; operations executed while gradients are
enabled record a node with parent links and a backward closure, and
``backward`` replays the graph in reverse topological order accumulating
into ``.grad``.  The primitive set is exactly what the sequence models here
need (matmul, elementwise maps, reductions, RMS norm, softmax cross-entropy,
gather, the linear-recurrence scan, and a few shape ops); there is no
intention of being a general framework.

``no_grad()`` suspends recording, which is how fixed-point iterations run
tape-free before the differentiable tail steps.  ``tape_elements()`` exposes
how many output elements have been recorded since the last reset; the
training memory contracts are asserted against this counter.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from . import scan as scanlib

_grad_enabled = True
_taped_elements = 0
_taped_nodes = 0


@contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


def reset_tape_counter() -> None:
    global _taped_elements, _taped_nodes
    _taped_elements = 0
    _taped_nodes = 0


def tape_elements() -> int:
    return _taped_elements


def tape_nodes() -> int:
    return _taped_nodes


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: Tensor, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None]) -> Tensor:
    """Attach tape metadata to ``out`` if recording is on and any parent needs it."""
    global _taped_elements, _taped_nodes
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        _taped_elements += out.data.size
        _taped_nodes += 1
    return out


def backward(loss: Tensor, seed: np.ndarray | None = None) -> None:
    """Accumulate d(loss)/dx into ``.grad`` of every tensor on the tape."""
    if not loss.requires_grad:
        raise ValueError("backward() on a tensor that is not on the tape")
    if seed is None:
        if loss.data.size != 1:
            raise ValueError("backward() without seed requires a scalar loss")
        seed = np.ones_like(loss.data)

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.asarray(seed, dtype=loss.dtype)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.accumulate_grad(g)
            continue
        node._backward(g)
        # node._backward stashes parent grads through _send
        for p in node._parents:
            pg = _pending.pop(id(p), None)
            if pg is None:
                continue
            if id(p) in grads:
                grads[id(p)] += pg
            elif p._backward is None and p.requires_grad:
                p.accumulate_grad(pg)
            else:
                grads[id(p)] = pg


_pending: dict[int, np.ndarray] = {}


def _send(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    prev = _pending.get(id(t))
    _pending[id(t)] = g if prev is None else prev + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and linear primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data)

    def bw(g):
        _send(a, _unbroadcast(g, a.data.shape))
        _send(b, _unbroadcast(g, b.data.shape))

    return _record(out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data)

    def bw(g):
        _send(a, _unbroadcast(g * b.data, a.data.shape))
        _send(b, _unbroadcast(g * a.data, b.data.shape))

    return _record(out, (a, b), bw)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data @ b.data)

    def bw(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            _send(a, _unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            _send(b, _unbroadcast(gb, b.data.shape))

    return _record(out, (a, b), bw)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.exp(a.data))

    def bw(g):
        _send(a, g * out.data)

    return _record(out, (a,), bw)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(_sigmoid(a.data))

    def bw(g):
        _send(a, g * out.data * (1.0 - out.data))

    return _record(out, (a,), bw)


def softplus(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.logaddexp(0.0, a.data))

    def bw(g):
        _send(a, g * _sigmoid(a.data))

    return _record(out, (a,), bw)


def silu(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    out = Tensor(a.data * s)

    def bw(g):
        _send(a, g * (s * (1.0 + a.data * (1.0 - s))))

    return _record(out, (a,), bw)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient is passed only through the interior."""
    a = as_tensor(a)
    out = Tensor(np.clip(a.data, lo, hi))

    def bw(g):
        _send(a, g * ((a.data > lo) & (a.data < hi)))

    return _record(out, (a,), bw)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is None:
            _send(a, np.broadcast_to(g, a.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _send(a, np.broadcast_to(g, a.data.shape).copy())

    return _record(out, (a,), bw)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.data.shape[ax] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# shape primitives


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape))

    def bw(g):
        _send(a, g.reshape(a.data.shape))

    return _record(out, (a,), bw)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.transpose(a.data, axes))
    inverse = np.argsort(axes)

    def bw(g):
        _send(a, np.transpose(g, inverse))

    return _record(out, (a,), bw)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.broadcast_to(a.data, shape).copy())

    def bw(g):
        _send(a, _unbroadcast(g, a.data.shape))

    return _record(out, (a,), bw)


def concat(parts: Iterable[Tensor], axis: int) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        for p, gp in zip(parts, np.split(g, splits, axis=axis)):
            _send(p, gp)

    return _record(out, tuple(parts), bw)


def slice_last(a, start: int, stop: int) -> Tensor:
    """Contiguous slice along the last axis; backward zero-pads."""
    a = as_tensor(a)
    out = Tensor(a.data[..., start:stop].copy())

    def bw(g):
        full = np.zeros_like(a.data)
        full[..., start:stop] = g
        _send(a, full)

    return _record(out, (a,), bw)


def slice_time(a, start: int, stop: int) -> Tensor:
    """Contiguous slice along axis 1 (time); backward zero-pads."""
    a = as_tensor(a)
    out = Tensor(a.data[:, start:stop].copy())

    def bw(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        _send(a, full)

    return _record(out, (a,), bw)


def time_shift(a) -> Tensor:
    """Shift right by one along axis 1 with zero fill: out[:, t] = a[:, t-1]."""
    a = as_tensor(a)
    shifted = np.zeros_like(a.data)
    shifted[:, 1:] = a.data[:, :-1]
    out = Tensor(shifted)

    def bw(g):
        ga = np.zeros_like(a.data)
        ga[:, :-1] = g[:, 1:]
        _send(a, ga)

    return _record(out, (a,), bw)


def gather_rows(table, index: np.ndarray) -> Tensor:
    """Row lookup of a (V, d) table with an integer index array."""
    table = as_tensor(table)
    idx = np.asarray(index)
    out = Tensor(table.data[idx])

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.data.shape[-1]))
        _send(table, gt)

    return _record(out, (table,), bw)


# ---------------------------------------------------------------------------
# fused numerical primitives


def rms_norm(a, scale, eps: float = 1e-6) -> Tensor:
    """Root-mean-square normalization over the last axis, scaled per channel."""
    a, scale = as_tensor(a), as_tensor(scale)
    n = a.data.shape[-1]
    ms = np.mean(a.data * a.data, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + eps)
    normed = a.data * inv
    out = Tensor(normed * scale.data)

    def bw(g):
        if scale.requires_grad:
            _send(scale, _unbroadcast(g * normed, scale.data.shape))
        if a.requires_grad:
            gs = g * scale.data
            dot = np.sum(gs * a.data, axis=-1, keepdims=True)
            _send(a, gs * inv - a.data * (dot * inv**3 / n))

    return _record(out, (a, scale), bw)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(p)

    def bw(g):
        dot = np.sum(g * p, axis=axis, keepdims=True)
        _send(a, (g - dot) * p)

    return _record(out, (a,), bw)


def softmax_cross_entropy(logits, labels: np.ndarray) -> Tensor:
    """Per-row cross-entropy of (N, V) logits against integer labels (N,)."""
    logits = as_tensor(logits)
    lab = np.asarray(labels).reshape(-1)
    x = logits.data
    m = x.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(x - m).sum(axis=-1))
    rows = np.arange(x.shape[0])
    out = Tensor(lse - x[rows, lab])

    def bw(g):
        p = np.exp(x - m)
        p /= p.sum(axis=-1, keepdims=True)
        p[rows, lab] -= 1.0
        _send(logits, p * g[:, None])

    return _record(out, (logits,), bw)


def scan_time(decay, inputs, h0) -> Tensor:
    """Taped linear recurrence h_t = decay_t * h_{t-1} + input_t.

    Shapes (B, T, C); the forward pass runs the parallel combine tree, the
    backward pass is the adjoint recurrence (a reversed scan of the incoming
    state gradients).
    """
    decay, inputs, h0 = as_tensor(decay), as_tensor(inputs), as_tensor(h0)
    states = scanlib.scan_parallel(decay.data, inputs.data, h0.data)
    out = Tensor(states)

    def bw(g):
        d = decay.data
        # gbar_t = g_t + d_{t+1} gbar_{t+1}, computed as a flipped scan whose
        # decay is d shifted one step to the left
        d_flip = np.concatenate([np.ones_like(d[:, :1]), d[:, :0:-1]], axis=1)
        zeros = np.zeros_like(h0.data)
        gbar = scanlib.scan_parallel(d_flip, g[:, ::-1], zeros)[:, ::-1]
        if inputs.requires_grad:
            _send(inputs, gbar)
        if decay.requires_grad:
            h_prev = np.concatenate([h0.data[:, None], states[:, :-1]], axis=1)
            _send(decay, gbar * h_prev)
        if h0.requires_grad:
            _send(h0, d[:, 0] * gbar[:, 0])

    return _record(out, (decay, inputs, h0), bw)


# ---------------------------------------------------------------------------
# verification


def grad_check(fn: Callable[[], Tensor], params: dict[str, Tensor],
               epsilon: float = 1e-5, sample: int | None = None,
               seed: int = 0) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` must be a deterministic scalar-valued closure over ``params``.
    ``sample`` caps the number of probed elements per parameter (all by
    default); the probe positions are seeded, so runs are reproducible.
    """
    for p in params.values():
        p.zero_grad()
    out = fn()
    backward(out)
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}

    rng = np.random.default_rng(seed)
    worst = 0.0
    for key, p in params.items():
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if sample is not None and flat.size > sample:
            idx = rng.choice(flat.size, size=sample, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + epsilon
            with no_grad():
                hi = fn().item()
            flat[i] = orig - epsilon
            with no_grad():
                lo = fn().item()
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * epsilon)
            ana = analytic[key].reshape(-1)[i]
            err = abs(ana - numeric) / (abs(ana) + abs(numeric) + 1e-12)
            worst = max(worst, err)
    return worst
