"""Float64 tensors with a reverse-mode differentiation tape.

Every primitive that touches a tracked tensor appends a node to the active
tape (a Wengert list, so node order is topological by construction).  The
backward rules are themselves written with tape primitives: when
``backward(..., create_graph=True)`` is used, the returned gradients are
tape-attached and can be differentiated again.  That second pass is what a
gradient-norm penalty inside a training loss needs.

Broadcasting is deliberately restricted to exact shape match or a scalar
(size-1) operand; layer code reshapes and broadcasts explicitly.  All data
is float64.  A tape and its tensors belong to one thread; independent tapes
may run on different threads.
"""

from __future__ import annotations

import threading
import weakref
from contextlib import contextmanager

import numpy as np

from .errors import ContractError, DomainError, ShapeError

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "elementwise",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "abs_",
    "square",
    "sqrt",
    "exp",
    "expm1",
    "log1p",
    "tanh",
    "sigmoid",
    "matmul",
    "transpose",
    "reshape",
    "broadcast_to",
    "narrow",
    "concat",
    "reduce_sum",
    "reduce_mean",
    "zeros",
]

_F64 = np.float64


class _TapeStack(threading.local):
    def __init__(self):
        self.stack = []


_TAPES = _TapeStack()


def _active_tape():
    stack = _TAPES.stack
    return stack[-1] if stack else None


class Tensor:
    """Dense float64 array, optionally linked into a differentiation tape.

    ``tape_id`` is assigned when the tensor first participates in a recorded
    operation; it is only meaningful for the tape it was assigned on.  Leaf
    tensors created with ``requires_grad=True`` join whichever tape consumes
    them next.  Treat ``data`` as immutable while a tape referencing the
    tensor is alive; optimizers rebind ``data`` rather than writing in place.
    """

    __slots__ = ("data", "requires_grad", "_tape_ref", "tape_id", "__weakref__")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=_F64)
        self.requires_grad = requires_grad
        self._tape_ref = None
        self.tape_id = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def tape(self):
        ref = self._tape_ref
        return ref() if ref is not None else None

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a size-1 tensor, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        """Same values, no tape link (shares the underlying buffer)."""
        return _wrap(self.data)

    def numpy(self):
        return self.data

    # arithmetic sugar; the module-level functions are the primary API
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axes=None, keepdims=False):
        return reduce_sum(self, axes, keepdims)

    def mean(self, axes=None, keepdims=False):
        return reduce_mean(self, axes, keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def __repr__(self):
        if self.data.size <= 8:
            return f"Tensor({self.data.tolist()})"
        return f"Tensor(shape={self.data.shape})"


def _wrap(arr):
    t = Tensor.__new__(Tensor)
    t.data = arr
    t.requires_grad = False
    t._tape_ref = None
    t.tape_id = None
    return t


def zeros(shape):
    return _wrap(np.zeros(shape, dtype=_F64))


class _Node:
    __slots__ = ("op", "inputs", "out", "out_id", "fwd", "vjp")

    def __init__(self, op, inputs, out, out_id, fwd, vjp):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.out_id = out_id
        self.fwd = fwd
        self.vjp = vjp


class Tape:
    """Ordered record of primitive operations for one differentiation pass."""

    __slots__ = ("nodes", "_recording", "_n_ids", "__weakref__")

    def __init__(self):
        self.nodes = []
        self._recording = True
        self._n_ids = 0

    def __enter__(self):
        _TAPES.stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPES.stack.pop()
        if popped is not self:
            raise ContractError("tape context exited out of order")
        return False

    def _new_id(self):
        i = self._n_ids
        self._n_ids = i + 1
        return i

    @contextmanager
    def paused(self):
        prev = self._recording
        self._recording = False
        try:
            yield
        finally:
            self._recording = prev

    def replay_matches(self):
        """Recompute every node from its inputs' current data.

        Returns True when every recomputed output equals the recorded one
        bit for bit; used to assert tape determinism.
        """
        for node in self.nodes:
            again = node.fwd()
            if not np.array_equal(again, node.out.data):
                return False
        return True


def _record(op, out_data, inputs, fwd, make_vjp):
    tape = _active_tape()
    out = _wrap(out_data)
    if tape is None or not tape._recording:
        return out
    tracked = False
    for t in inputs:
        if t.requires_grad:
            tracked = True
            break
        ref = t._tape_ref
        if ref is not None and ref() is tape and t.tape_id is not None:
            tracked = True
            break
    if not tracked:
        return out
    tape_ref = weakref.ref(tape)
    for t in inputs:
        if t.requires_grad:
            ref = t._tape_ref
            if ref is None or ref() is not tape:
                t._tape_ref = tape_ref
                t.tape_id = tape._new_id()
    out._tape_ref = tape_ref
    out.tape_id = tape._new_id()
    tape.nodes.append(_Node(op, inputs, out, out.tape_id, fwd, make_vjp(out)))
    return out


def _coerce(x):
    if isinstance(x, Tensor):
        return x
    return _wrap(np.asarray(x, dtype=_F64))


def _check_binary(op, a, b):
    if a.data.shape == b.data.shape:
        return
    if a.data.size == 1 or b.data.size == 1:
        return
    raise ShapeError(
        f"{op}: shapes {a.data.shape} and {b.data.shape} do not match"
        " (only exact match or scalar broadcast is supported)"
    )


def _unb(g, t):
    # collapse a scalar-broadcast gradient back to the operand's shape
    if g.data.shape == t.data.shape:
        return g
    return reshape(reduce_sum(g), t.data.shape)


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a, b):
    a = _coerce(a)
    b = _coerce(b)
    _check_binary("add", a, b)
    return _record(
        "add",
        a.data + b.data,
        (a, b),
        lambda: a.data + b.data,
        lambda out: lambda g: (_unb(g, a), _unb(g, b)),
    )


def sub(a, b):
    a = _coerce(a)
    b = _coerce(b)
    _check_binary("sub", a, b)
    return _record(
        "sub",
        a.data - b.data,
        (a, b),
        lambda: a.data - b.data,
        lambda out: lambda g: (_unb(g, a), _unb(neg(g), b)),
    )


def mul(a, b):
    a = _coerce(a)
    b = _coerce(b)
    _check_binary("mul", a, b)
    return _record(
        "mul",
        a.data * b.data,
        (a, b),
        lambda: a.data * b.data,
        lambda out: lambda g: (_unb(mul(g, b), a), _unb(mul(g, a), b)),
    )


def div(a, b):
    a = _coerce(a)
    b = _coerce(b)
    _check_binary("div", a, b)
    if np.any(b.data == 0.0):
        raise DomainError("div: denominator contains zero")
    return _record(
        "div",
        a.data / b.data,
        (a, b),
        lambda: a.data / b.data,
        lambda out: lambda g: (
            _unb(div(g, b), a),
            _unb(neg(div(mul(g, a), square(b))), b),
        ),
    )


def neg(a):
    a = _coerce(a)
    return _record(
        "neg",
        -a.data,
        (a,),
        lambda: -a.data,
        lambda out: lambda g: (neg(g),),
    )


def abs_(a):
    a = _coerce(a)
    return _record(
        "abs",
        np.abs(a.data),
        (a,),
        lambda: np.abs(a.data),
        # sign is flat almost everywhere; treated as a constant in the graph
        lambda out: lambda g: (mul(g, _wrap(np.sign(a.data))),),
    )


def square(a):
    a = _coerce(a)
    return _record(
        "square",
        a.data * a.data,
        (a,),
        lambda: a.data * a.data,
        lambda out: lambda g: (mul(mul(g, a), 2.0),),
    )


def sqrt(a):
    a = _coerce(a)
    if np.any(a.data < 0.0):
        raise DomainError("sqrt: negative input")
    return _record(
        "sqrt",
        np.sqrt(a.data),
        (a,),
        lambda: np.sqrt(a.data),
        # backward needs strictly positive inputs (div rejects a zero root)
        lambda out: lambda g: (div(mul(g, 0.5), out),),
    )


def exp(a):
    a = _coerce(a)
    return _record(
        "exp",
        np.exp(a.data),
        (a,),
        lambda: np.exp(a.data),
        lambda out: lambda g: (mul(g, out),),
    )


def expm1(a):
    a = _coerce(a)
    return _record(
        "expm1",
        np.expm1(a.data),
        (a,),
        lambda: np.expm1(a.data),
        lambda out: lambda g: (mul(g, add(out, 1.0)),),
    )


def log1p(a):
    a = _coerce(a)
    if np.any(a.data <= -1.0):
        raise DomainError("log1p: input must be greater than -1")
    return _record(
        "log1p",
        np.log1p(a.data),
        (a,),
        lambda: np.log1p(a.data),
        lambda out: lambda g: (div(g, add(a, 1.0)),),
    )


def tanh(a):
    a = _coerce(a)
    return _record(
        "tanh",
        np.tanh(a.data),
        (a,),
        lambda: np.tanh(a.data),
        lambda out: lambda g: (mul(g, sub(1.0, square(out))),),
    )


def _sigmoid_np(x):
    t = np.exp(-np.abs(x))
    return np.where(x >= 0.0, 1.0 / (1.0 + t), t / (1.0 + t))


def sigmoid(a):
    a = _coerce(a)
    return _record(
        "sigmoid",
        _sigmoid_np(a.data),
        (a,),
        lambda: _sigmoid_np(a.data),
        lambda out: lambda g: (mul(g, mul(out, sub(1.0, out))),),
    )


ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "abs": abs_,
    "square": square,
    "sqrt": sqrt,
    "exp": exp,
    "expm1": expm1,
    "log1p": log1p,
    "tanh": tanh,
    "sigmoid": sigmoid,
}


def elementwise(op_kind, a, b=None):
    """Dispatch an elementwise primitive by name."""
    try:
        fn = ELEMENTWISE[op_kind]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op_kind!r}") from None
    return fn(a) if b is None else fn(a, b)


# ---------------------------------------------------------------------------
# linear algebra and movement


def matmul(a, b):
    a = _coerce(a)
    b = _coerce(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: need 2-d operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.data.shape} x {b.data.shape}")
    return _record(
        "matmul",
        a.data @ b.data,
        (a, b),
        lambda: a.data @ b.data,
        lambda out: lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g)),
    )


def transpose(a):
    a = _coerce(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: need a 2-d tensor, got shape {a.data.shape}")
    return _record(
        "transpose",
        a.data.T,
        (a,),
        lambda: a.data.T,
        lambda out: lambda g: (transpose(g),),
    )


def reshape(a, shape):
    a = _coerce(a)
    shape = tuple(int(s) for s in shape)
    if a.data.shape == shape:
        return a
    if int(np.prod(shape, dtype=np.int64)) != a.data.size:
        raise ShapeError(f"reshape: cannot view {a.data.shape} as {shape}")
    old = a.data.shape
    return _record(
        "reshape",
        a.data.reshape(shape),
        (a,),
        lambda: a.data.reshape(shape),
        lambda out: lambda g: (reshape(g, old),),
    )


def broadcast_to(a, shape):
    a = _coerce(a)
    shape = tuple(int(s) for s in shape)
    if a.data.shape == shape:
        return a
    if a.data.ndim == 0:
        reduce_axes = tuple(range(len(shape)))
    elif a.data.ndim == len(shape) and all(
        d == s or d == 1 for d, s in zip(a.data.shape, shape)
    ):
        reduce_axes = tuple(
            i for i, (d, s) in enumerate(zip(a.data.shape, shape)) if d == 1 and s != 1
        )
    else:
        raise ShapeError(f"broadcast_to: cannot expand {a.data.shape} to {shape}")
    old = a.data.shape

    def make_vjp(out):
        def vjp(g):
            gg = reduce_sum(g, reduce_axes, keepdims=True) if reduce_axes else g
            return (reshape(gg, old),)

        return vjp

    return _record(
        "broadcast",
        np.broadcast_to(a.data, shape),
        (a,),
        lambda: np.broadcast_to(a.data, shape),
        make_vjp,
    )


def narrow(a, axis, start, length):
    """Contiguous slice of ``length`` entries along ``axis`` starting at ``start``."""
    a = _coerce(a)
    if not 0 <= axis < a.data.ndim:
        raise ShapeError(f"narrow: axis {axis} out of range for shape {a.data.shape}")
    dim = a.data.shape[axis]
    if length < 1 or start < 0 or start + length > dim:
        raise ShapeError(
            f"narrow: window [{start}, {start + length}) exceeds axis of size {dim}"
        )
    index = tuple(
        slice(start, start + length) if i == axis else slice(None)
        for i in range(a.data.ndim)
    )
    old = a.data.shape

    def make_vjp(out):
        def vjp(g):
            parts = []
            if start > 0:
                before = list(old)
                before[axis] = start
                parts.append(_wrap(np.zeros(before, dtype=_F64)))
            parts.append(g)
            if start + length < dim:
                after = list(old)
                after[axis] = dim - start - length
                parts.append(_wrap(np.zeros(after, dtype=_F64)))
            if len(parts) == 1:
                return (g,)
            return (concat(parts, axis),)

        return vjp

    return _record(
        "narrow",
        a.data[index],
        (a,),
        lambda: a.data[index],
        make_vjp,
    )


def concat(tensors, axis):
    ts = tuple(_coerce(t) for t in tensors)
    if not ts:
        raise ShapeError("concat: need at least one tensor")
    ndim = ts[0].data.ndim
    if not 0 <= axis < ndim:
        raise ShapeError(f"concat: axis {axis} out of range for rank {ndim}")
    for t in ts[1:]:
        if t.data.ndim != ndim:
            raise ShapeError("concat: rank mismatch")
        for i in range(ndim):
            if i != axis and t.data.shape[i] != ts[0].data.shape[i]:
                raise ShapeError(
                    f"concat: shapes {ts[0].data.shape} and {t.data.shape}"
                    f" differ off axis {axis}"
                )
    widths = [t.data.shape[axis] for t in ts]

    def make_vjp(out):
        def vjp(g):
            grads = []
            offset = 0
            for w in widths:
                grads.append(narrow(g, axis, offset, w))
                offset += w
            return tuple(grads)

        return vjp

    return _record(
        "concat",
        np.concatenate([t.data for t in ts], axis=axis),
        ts,
        lambda: np.concatenate([t.data for t in ts], axis=axis),
        make_vjp,
    )


# ---------------------------------------------------------------------------
# reductions


def _norm_axes(a, axes):
    if axes is None:
        return tuple(range(a.data.ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(int(ax) for ax in axes)
    seen = set()
    for ax in axes:
        if not 0 <= ax < a.data.ndim:
            raise ShapeError(f"reduce: axis {ax} out of range for shape {a.data.shape}")
        if ax in seen:
            raise ShapeError(f"reduce: duplicate axis {ax}")
        seen.add(ax)
    return axes


def _keepdims_shape(shape, axes):
    out = list(shape)
    for ax in axes:
        out[ax] = 1
    return tuple(out)


def reduce_sum(a, axes=None, keepdims=False):
    """Sum over ``axes`` (all axes when None; empty tuple is a no-op)."""
    a = _coerce(a)
    axes_t = _norm_axes(a, axes)
    out_data = np.sum(a.data, axis=axes_t, keepdims=keepdims) if axes_t else a.data
    old = a.data.shape
    kshape = _keepdims_shape(old, axes_t)

    def make_vjp(out):
        def vjp(g):
            gg = g if (keepdims or not axes_t) else reshape(g, kshape)
            return (broadcast_to(gg, old),)

        return vjp

    return _record(
        "sum",
        out_data,
        (a,),
        lambda: np.sum(a.data, axis=axes_t, keepdims=keepdims) if axes_t else a.data,
        make_vjp,
    )


def reduce_mean(a, axes=None, keepdims=False):
    """Mean over ``axes``, computed as sum divided by the element count."""
    a = _coerce(a)
    axes_t = _norm_axes(a, axes)
    count = 1
    for ax in axes_t:
        count *= a.data.shape[ax]
    if count == 0:
        raise ShapeError("reduce_mean: zero-size reduction")
    out_data = (
        np.sum(a.data, axis=axes_t, keepdims=keepdims) / count if axes_t else a.data
    )
    old = a.data.shape
    kshape = _keepdims_shape(old, axes_t)
    inv = 1.0 / count

    def make_vjp(out):
        def vjp(g):
            gg = g if (keepdims or not axes_t) else reshape(g, kshape)
            return (broadcast_to(mul(gg, inv), old),)

        return vjp

    return _record(
        "mean",
        out_data,
        (a,),
        lambda: np.sum(a.data, axis=axes_t, keepdims=keepdims) / count
        if axes_t
        else a.data,
        make_vjp,
    )


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss, wrt, create_graph=False):
    """Gradients of a scalar ``loss`` with respect to each tensor in ``wrt``.

    Returns a dict keyed by the tensors in ``wrt``.  Tensors that are not on
    the loss's tape (or received no contribution) map to zero tensors.  With
    ``create_graph=True`` the backward computation itself is recorded, so the
    returned gradients can be differentiated through a second call.
    """
    tape = loss.tape()
    if tape is None or loss.tape_id is None:
        raise ContractError("backward: loss is not attached to a tape")
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    grads = {loss.tape_id: _wrap(np.ones_like(loss.data))}
    hi = len(tape.nodes)
    if create_graph:
        _walk(tape, hi, grads)
    else:
        with tape.paused():
            _walk(tape, hi, grads)
    out = {}
    for t in wrt:
        g = None
        if t.tape() is tape and t.tape_id is not None:
            g = grads.get(t.tape_id)
        out[t] = g if g is not None else _wrap(np.zeros_like(t.data))
    return out


def _walk(tape, hi, grads):
    nodes = tape.nodes
    for i in range(hi - 1, -1, -1):
        node = nodes[i]
        g = grads.get(node.out_id)
        if g is None:
            continue
        in_grads = node.vjp(g)
        for t, ig in zip(node.inputs, in_grads):
            if ig is None:
                continue
            tid = t.tape_id
            if tid is None or t.tape() is not tape:
                continue
            prev = grads.get(tid)
            grads[tid] = ig if prev is None else add(prev, ig)
