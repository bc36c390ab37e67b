"""Reverse-mode automatic differentiation over dense float64 tensors.

Eager numpy forward computation; each operation is optionally recorded on an
ambient ``Tape``. ``Tape.backward`` replays the records in reverse order,
accumulating gradients additively into ``Tensor.grad`` buffers. All models
and losses in this package are expressed through these ops, so one engine
serves everything and finite-difference checking (``grad_check``) applies
uniformly.

Everything is float64 and row-major. There is no broadcasting magic beyond
numpy's own rules; gradients of broadcast operands are summed back to the
operand shape.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "TapeError",
    "no_grad",
    "backward",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "take",
    "embedding",
    "tanh",
    "sigmoid",
    "relu",
    "exp",
    "log",
    "logaddexp",
    "softmax",
    "log_softmax",
    "tsum",
    "tmean",
    "max_pool",
    "layer_norm",
    "grad_check",
    "grad_check_params",
    "GradCheckReport",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class TapeError(RuntimeError):
    """Tape misuse: backward twice, non-scalar loss, loss off-tape."""


# Ambient tape stack, one per thread: a tape and its tensors form one
# single-threaded unit of work, but independent tapes (e.g. per evaluation
# worker) may run concurrently. A ``None`` entry (pushed by ``no_grad``)
# disables recording while it is on top.
class _TapeStacks(threading.local):
    def __init__(self):
        self.stack: list["Tape | None"] = []


_TLS = _TapeStacks()


def _active_tape():
    s = _TLS.stack
    return s[-1] if s else None


class no_grad:
    """Context manager that suspends tape recording (e.g. for decoding)."""

    def __enter__(self):
        _TLS.stack.append(None)
        return self

    def __exit__(self, exc_type, exc, tb):
        _TLS.stack.pop()
        return False


class Tensor:
    """Dense row-major float64 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_tracked", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tracked = self.requires_grad
        self._tape: Tape | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        else:
            self.grad[...] = 0.0

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Operator sugar; the heavy lifting lives in the module-level ops.
    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return _getitem(self, key)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    """One recorded operation: input refs, output ref, backward rule."""

    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of operations for exactly one backward pass.

    Use as a context manager; ops executed inside record themselves when any
    input is gradient-tracked. Multiple independent tapes may exist (one per
    utterance); gradients from separate backward calls accumulate additively
    into shared parameter tensors.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._spent = False

    def __enter__(self):
        _TLS.stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TLS.stack.pop()
        assert popped is self, "tape stack corrupted"
        return False

    def backward(self, loss: Tensor):
        """Seed d(loss)/d(loss)=1 and accumulate grads through all records."""
        if loss.data.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self._spent:
            raise TapeError("backward already ran on this tape; build a new tape")
        if loss._tape is not self:
            raise TapeError("loss tensor was not recorded on this tape")
        self._spent = True
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            g = node.output.grad
            if g is None:
                continue
            node.backward_fn(g)


def backward(loss: Tensor):
    """Backward through the tape ``loss`` was recorded on."""
    if loss._tape is None:
        raise TapeError("loss is not on any tape (was it built inside a Tape context?)")
    loss._tape.backward(loss)


def _make(inputs: tuple, out_data: np.ndarray, backward_fn) -> Tensor:
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(i._tracked for i in inputs):
        out._tracked = True
        out._tape = tape
        tape.nodes.append(_Node(inputs, out, backward_fn))
    return out


def _accum(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` over axes that were broadcast up from ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, opname: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} are not broadcastable") from None


# ---------------------------------------------------------------------------
# elementwise / arithmetic ops


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "add")
    out_data = a.data + b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make((a, b), out_data, bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "sub")
    out_data = a.data - b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make((a, b), out_data, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "mul")
    out_data = a.data * b.data

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make((a, b), out_data, bwd)


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        _accum(a, -g)

    return _make((a,), -a.data, bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. ``a`` may have leading batch axes; ``b`` must be 2-D."""
    if a.ndim < 2 or b.ndim != 2:
        raise ShapeError(f"matmul: need a.ndim>=2 and b.ndim==2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def bwd(g):
        _accum(a, g @ b.data.T)
        k = a.shape[-1]
        n = b.shape[1]
        _accum(b, a.data.reshape(-1, k).T @ g.reshape(-1, n))

    return _make((a, b), out_data, bwd)


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)

    def bwd(g):
        _accum(a, np.transpose(g, inv))

    return _make((a,), np.transpose(a.data, axes), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def bwd(g):
        _accum(a, g.reshape(a.shape))

    return _make((a,), a.data.reshape(shape), bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [_lift(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of zero tensors")
    out_data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(t, g[tuple(idx)])

    return _make(tuple(ts), out_data, bwd)


def _getitem(a: Tensor, key) -> Tensor:
    out_data = a.data[key]

    def bwd(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        a.grad[key] += g

    return _make((a,), out_data, bwd)


def take(a: Tensor, indices) -> Tensor:
    """Advanced indexing with integer arrays; duplicates accumulate in backward."""
    idx = tuple(np.asarray(i, dtype=np.intp) for i in indices)
    out_data = a.data[idx]

    def bwd(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        np.add.at(a.grad, idx, g)

    return _make((a,), out_data, bwd)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; backward scatters into the looked-up rows."""
    ids = np.asarray(ids, dtype=np.intp)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding ids out of range [0, {table.shape[0]}): {ids.tolist()}")
    out_data = table.data[ids]

    def bwd(g):
        if table.grad is None:
            table.grad = np.zeros_like(table.data)
        np.add.at(table.grad, ids, g)

    return _make((table,), out_data, bwd)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def bwd(g):
        _accum(a, g * (1.0 - out_data * out_data))

    return _make((a,), out_data, bwd)


def sigmoid(a: Tensor) -> Tensor:
    # 0.5*(tanh(x/2)+1) is stable for large |x|
    out_data = 0.5 * (np.tanh(0.5 * a.data) + 1.0)

    def bwd(g):
        _accum(a, g * out_data * (1.0 - out_data))

    return _make((a,), out_data, bwd)


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0.0)

    def bwd(g):
        _accum(a, g * (a.data > 0.0))

    return _make((a,), out_data, bwd)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bwd(g):
        _accum(a, g * out_data)

    return _make((a,), out_data, bwd)


def log(a: Tensor) -> Tensor:
    out_data = np.log(a.data)

    def bwd(g):
        _accum(a, g / a.data)

    return _make((a,), out_data, bwd)


def logaddexp(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "logaddexp")
    out_data = np.logaddexp(a.data, b.data)

    def bwd(g):
        _accum(a, _unbroadcast(g * np.exp(a.data - out_data), a.shape))
        _accum(b, _unbroadcast(g * np.exp(b.data - out_data), b.shape))

    return _make((a, b), out_data, bwd)


# ---------------------------------------------------------------------------
# reductions / normalizations


def softmax(a: Tensor, axis: int) -> Tensor:
    if a.shape[axis] == 0:
        raise ShapeError(f"softmax over empty axis {axis} of shape {a.shape}")
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        _accum(a, out_data * (g - dot))

    return _make((a,), out_data, bwd)


def log_softmax(a: Tensor, axis: int) -> Tensor:
    if a.shape[axis] == 0:
        raise ShapeError(f"log_softmax over empty axis {axis} of shape {a.shape}")
    m = a.data.max(axis=axis, keepdims=True)
    shifted = a.data - m
    out_data = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def bwd(g):
        gsum = g.sum(axis=axis, keepdims=True)
        _accum(a, g - np.exp(out_data) * gsum)

    return _make((a,), out_data, bwd)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(gg, a.shape).copy())

    return _make((a,), out_data, bwd)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    out_data = a.data.mean(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            _accum(a, np.broadcast_to(g / n, a.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(gg / n, a.shape).copy())

    return _make((a,), out_data, bwd)


def max_pool(a: Tensor, axis: int = 0) -> Tensor:
    """Elementwise max over one axis; ties route gradient to the first argmax."""
    if a.shape[axis] == 0:
        raise ShapeError(f"max_pool over empty axis {axis} of shape {a.shape}")
    out_data = a.data.max(axis=axis)
    argmax = a.data.argmax(axis=axis)

    def bwd(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        gfull = np.zeros_like(a.data)
        np.put_along_axis(gfull, np.expand_dims(argmax, axis), np.expand_dims(g, axis), axis)
        a.grad += gfull

    return _make((a,), out_data, bwd)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias must be ({d},), got {gain.shape}/{bias.shape}")
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv
    out_data = xhat * gain.data + bias.data

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        _accum(gain, (g * xhat).sum(axis=lead))
        _accum(bias, g.sum(axis=lead))
        gx = g * gain.data
        m1 = gx.mean(axis=-1, keepdims=True)
        m2 = (gx * xhat).mean(axis=-1, keepdims=True)
        _accum(a, inv * (gx - m1 - xhat * m2))

    return _make((a, gain, bias), out_data, bwd)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    """Per-coordinate comparison of tape gradients vs central differences."""

    passed: bool
    max_rel_error: float
    rtol: float
    eps: float
    coords: list = field(default_factory=list)  # (flat index, analytic, fd, rel)

    def worst(self, k: int = 5):
        return sorted(self.coords, key=lambda c: -c[3])[:k]


def _rel_err(a: float, f: float, floor: float) -> float:
    return abs(a - f) / max(abs(a), abs(f), floor)


def grad_check(f, point: Tensor, eps: float = 1e-5, rtol: float = 1e-4,
               coords=None, floor: float = 1e-6) -> GradCheckReport:
    """Check the tape gradient of scalar-valued ``f`` at ``point``.

    ``f`` takes one Tensor and returns a scalar Tensor. Central differences
    (f(x+eps)-f(x-eps))/(2 eps) are compared per coordinate; the check passes
    iff the max relative error is <= rtol. Non-determinism (two evaluations
    disagreeing bitwise) raises.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")

    def value(arr):
        with no_grad():
            out = f(Tensor(arr))
        return float(out.data.reshape(()))

    base = point.data.copy()
    v1, v2 = value(base), value(base)
    if v1 != v2:
        raise TapeError(f"function is not deterministic: {v1!r} != {v2!r}")

    probe = Tensor(base.copy(), requires_grad=True)
    with Tape() as tape:
        out = f(probe)
    tape.backward(out)
    analytic = np.zeros_like(base) if probe.grad is None else probe.grad
    analytic = analytic.reshape(-1)

    flat = base.reshape(-1)
    idxs = range(flat.size) if coords is None else coords
    rows = []
    work = base.copy().reshape(-1)
    for i in idxs:
        orig = work[i]
        work[i] = orig + eps
        fp = value(work.reshape(base.shape))
        work[i] = orig - eps
        fm = value(work.reshape(base.shape))
        work[i] = orig
        fd = (fp - fm) / (2.0 * eps)
        rows.append((int(i), float(analytic[i]), float(fd), _rel_err(analytic[i], fd, floor)))
    max_rel = max((r[3] for r in rows), default=0.0)
    return GradCheckReport(passed=max_rel <= rtol, max_rel_error=max_rel,
                           rtol=rtol, eps=eps, coords=rows)


def grad_check_params(loss_fn, params: dict, eps: float = 1e-5, rtol: float = 1e-3,
                      max_coords_per_param: int | None = None, seed: int = 0,
                      floor: float = 1e-6) -> GradCheckReport:
    """FD-check d(loss)/d(theta) for every named parameter tensor.

    ``loss_fn`` builds and returns a fresh scalar loss Tensor (it must not
    call backward itself). When ``max_coords_per_param`` is set, a seeded
    random subset of coordinates is checked per parameter.
    """

    def value():
        with no_grad():
            out = loss_fn()
        return float(out.data.reshape(()))

    v1, v2 = value(), value()
    if v1 != v2:
        raise TapeError(f"loss_fn is not deterministic: {v1!r} != {v2!r}")

    saved = {name: (p.grad.copy() if p.grad is not None else None) for name, p in params.items()}
    for p in params.values():
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in params.items()}
    for name, p in params.items():
        p.grad = saved[name]

    rng = np.random.default_rng(seed)
    rows = []
    for name, p in sorted(params.items()):
        flat = p.data.reshape(-1)
        n = flat.size
        if max_coords_per_param is not None and n > max_coords_per_param:
            idxs = np.sort(rng.choice(n, size=max_coords_per_param, replace=False))
        else:
            idxs = np.arange(n)
        ga = analytic[name].reshape(-1)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            fp = value()
            flat[i] = orig - eps
            fm = value()
            flat[i] = orig
            fd = (fp - fm) / (2.0 * eps)
            rows.append((f"{name}[{int(i)}]", float(ga[i]), float(fd),
                         _rel_err(ga[i], fd, floor)))
    max_rel = max((r[3] for r in rows), default=0.0)
    return GradCheckReport(passed=max_rel <= rtol, max_rel_error=max_rel,
                           rtol=rtol, eps=eps, coords=rows)
