"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Recording` is a tape. Leaves are registered with
:meth:`Recording.leaf`; every operation whose inputs include a recorded
tensor is evaluated eagerly and appended to the tape. Operations whose
inputs are all constants are evaluated without being recorded, which is
how attack loops keep model parameters out of the graph.

    rec = Recording()
    x = rec.leaf([1.0, 2.0])
    y = sum_(relu(x) * x)
    grads = rec.backward(y)      # {x.node_id: Tensor}
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Recording",
    "TensorError",
    "ShapeError",
    "NonFiniteError",
    "BackwardError",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "relu",
    "exp",
    "log",
    "abs_",
    "sum_",
    "mean",
    "max_reduce",
    "broadcast_to",
    "reshape",
    "clamp",
    "getitem",
    "stop_gradient",
    "inject_gradient_fault",
]


class TensorError(Exception):
    """Base class for tensor errors."""


class ShapeError(TensorError, ValueError):
    pass


class NonFiniteError(TensorError, FloatingPointError):
    pass


class BackwardError(TensorError):
    pass


# Op names whose backward is deliberately corrupted (gradcheck fault injection).
_FAULTY_OPS: set[str] = set()


@contextlib.contextmanager
def inject_gradient_fault(op: str) -> Iterator[None]:
    """Scale the backward of ``op`` by 1.5 while the context is active."""
    _FAULTY_OPS.add(op)
    try:
        yield
    finally:
        _FAULTY_OPS.discard(op)


class Tensor:
    """Dense float64 array, optionally attached to a :class:`Recording`."""

    __slots__ = ("data", "node_id", "_rec")
    # let numpy defer to our reflected operators
    __array_ufunc__ = None

    def __init__(self, data, node_id: int | None = None, rec: "Recording | None" = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.node_id = node_id
        self._rec = rec

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def recorded(self) -> bool:
        return self._rec is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f", node={self.node_id}" if self.node_id is not None else ""
        return f"Tensor({self.data!r}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


# Vector-Jacobian product: upstream gradient -> one gradient (or None) per input.
VJP = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Recording:
    """Ordered tape of operations supporting one-shot reverse-mode gradients.

    Node ids are positions on the tape, so inputs always precede their
    consumers. :meth:`backward` does not mutate the tape.
    """

    def __init__(self):
        self._ops: list[str] = []
        self._inputs: list[tuple[int | None, ...]] = []
        self._vjps: list[VJP | None] = []
        self._shapes: list[tuple[int, ...]] = []
        self._leaves: list[int] = []

    def __len__(self) -> int:
        return len(self._ops)

    @property
    def leaf_ids(self) -> list[int]:
        return list(self._leaves)

    def op_kinds(self) -> list[str]:
        return list(self._ops)

    def leaf(self, value) -> Tensor:
        data = np.array(value, dtype=np.float64)
        _check_finite(data, "leaf")
        node_id = len(self._ops)
        self._ops.append("leaf")
        self._inputs.append(())
        self._vjps.append(None)
        self._shapes.append(data.shape)
        self._leaves.append(node_id)
        return Tensor(data, node_id, self)

    def _push(self, op: str, inputs: Sequence[Tensor], value: np.ndarray, vjp: VJP) -> Tensor:
        node_id = len(self._ops)
        self._ops.append(op)
        self._inputs.append(tuple(t.node_id if t._rec is self else None for t in inputs))
        self._vjps.append(vjp)
        self._shapes.append(value.shape)
        return Tensor(value, node_id, self)

    def backward(self, output: Tensor) -> dict[int, Tensor]:
        """Gradient of the scalar ``output`` with respect to every leaf.

        Leaves the output does not depend on receive zeros.
        """
        if output._rec is not self or output.node_id is None:
            raise BackwardError("output is not part of this recording")
        if output.data.shape != ():
            raise BackwardError(f"output must be a 0-dim scalar, got shape {output.data.shape}")
        grads: dict[int, np.ndarray] = {output.node_id: np.ones((), dtype=np.float64)}
        leaves = set(self._leaves)
        for nid in range(output.node_id, -1, -1):
            if nid in leaves:
                continue
            g = grads.pop(nid, None)
            if g is None:
                continue
            op = self._ops[nid]
            parts = self._vjps[nid](g)
            for src, part in zip(self._inputs[nid], parts):
                if src is None or part is None:
                    continue
                if op in _FAULTY_OPS:
                    part = part * 1.5
                prev = grads.get(src)
                grads[src] = part if prev is None else prev + part
        out = {}
        for lid in self._leaves:
            g = grads.get(lid)
            if g is None:
                g = np.zeros(self._shapes[lid])
            out[lid] = Tensor(np.array(g, dtype=np.float64).reshape(self._shapes[lid]))
        return out

    def grad(self, output: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        """Convenience wrapper returning plain arrays for the given leaves."""
        gmap = self.backward(output)
        result = []
        for t in wrt:
            if t._rec is not self or t.node_id not in gmap:
                raise BackwardError("requested gradient for a tensor that is not a leaf of this recording")
            result.append(gmap[t.node_id].data)
        return result


def _check_finite(value: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite result in op '{op}'")


def _owner(*tensors: Tensor) -> Recording | None:
    rec = None
    for t in tensors:
        if t._rec is not None:
            if rec is not None and t._rec is not rec:
                raise TensorError("operands belong to different recordings")
            rec = t._rec
    return rec


def _make(op: str, inputs: Sequence[Tensor], value: np.ndarray, vjp: Callable[[], VJP]) -> Tensor:
    _check_finite(value, op)
    rec = _owner(*inputs)
    if rec is None:
        return Tensor(value)
    return rec._push(op, inputs, value, vjp())


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary(op: str, a, b, fwd, vjp_builder) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        with np.errstate(all="ignore"):
            value = fwd(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from exc
    return _make(op, (a, b), value, lambda: vjp_builder(a, b, value))


def add(a, b) -> Tensor:
    def vjp(a, b, _):
        return lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))

    return _binary("add", a, b, np.add, vjp)


def sub(a, b) -> Tensor:
    def vjp(a, b, _):
        return lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))

    return _binary("sub", a, b, np.subtract, vjp)


def mul(a, b) -> Tensor:
    def vjp(a, b, _):
        ad, bd = a.data, b.data
        return lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape))

    return _binary("mul", a, b, np.multiply, vjp)


def div(a, b) -> Tensor:
    def vjp(a, b, out):
        bd = b.data
        return lambda g: (_unbroadcast(g / bd, a.shape), _unbroadcast(-g * out / bd, b.shape))

    return _binary("div", a, b, np.divide, vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make("neg", (a,), -a.data, lambda: lambda g: (-g,))


def matmul(a, b) -> Tensor:
    """Batched matrix product; both operands need at least two dimensions."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands with ndim >= 2, got {a.shape} and {b.shape}")

    def vjp(a, b, _):
        ad, bd = a.data, b.data
        return lambda g: (
            _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), a.shape),
            _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), b.shape),
        )

    return _binary("matmul", a, b, np.matmul, vjp)


def _unary(op: str, a, value: np.ndarray, local_grad: Callable[[], np.ndarray]) -> Tensor:
    a = as_tensor(a)

    def vjp():
        d = local_grad()
        return lambda g: (g * d,)

    return _make(op, (a,), value, vjp)


def relu(a) -> Tensor:
    a = as_tensor(a)
    # subgradient at exactly 0 is 0
    return _unary("relu", a, np.maximum(a.data, 0.0), lambda: (a.data > 0).astype(np.float64))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(all="ignore"):
        value = np.exp(a.data)
    return _unary("exp", a, value, lambda: value)


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(all="ignore"):
        value = np.log(a.data)
    return _unary("log", a, value, lambda: 1.0 / a.data)


def abs_(a) -> Tensor:
    a = as_tensor(a)
    # np.sign(0) == 0 gives the zero subgradient at the kink
    return _unary("abs", a, np.abs(a.data), lambda: np.sign(a.data))


def clamp(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip to ``[lo, hi]``; gradient passes only strictly inside the bounds."""
    a = as_tensor(a)
    lo_v = -np.inf if lo is None else lo
    hi_v = np.inf if hi is None else hi
    if lo_v > hi_v:
        raise ValueError(f"clamp bounds reversed: {lo} > {hi}")
    value = np.clip(a.data, lo_v, hi_v)
    return _unary("clamp", a, value, lambda: ((a.data > lo_v) & (a.data < hi_v)).astype(np.float64))


def _norm_axis(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    try:
        return tuple(sorted(ax % ndim for ax in axis))
    except ZeroDivisionError:
        raise ShapeError("cannot reduce a 0-dim tensor along an axis") from None


def _expand_reduced(g: np.ndarray, shape: tuple[int, ...], axes: tuple[int, ...], keepdims: bool) -> np.ndarray:
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    value = np.sum(a.data, axis=axes, keepdims=keepdims)

    def vjp():
        return lambda g: (np.array(_expand_reduced(g, a.shape, axes, keepdims)),)

    return _make("sum", (a,), value, vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    if count == 0:
        raise ShapeError("mean over an empty axis")
    value = np.mean(a.data, axis=axes, keepdims=keepdims)

    def vjp():
        return lambda g: (_expand_reduced(g, a.shape, axes, keepdims) / count,)

    return _make("mean", (a,), value, vjp)


def max_reduce(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    """Maximum along one axis (or all); ties route the gradient to the lowest index."""
    a = as_tensor(a)
    if axis is None:
        flat = a.data.reshape(-1)
        idx = int(np.argmax(flat))
        value = np.array(flat[idx]).reshape((1,) * a.ndim if keepdims else ())

        def vjp():
            def f(g):
                out = np.zeros(flat.shape)
                out[idx] = np.sum(g)
                return (out.reshape(a.shape),)

            return f

        return _make("max", (a,), value, vjp)

    ax = axis % a.ndim
    idx = np.argmax(a.data, axis=ax)
    value = np.take_along_axis(a.data, np.expand_dims(idx, ax), axis=ax)
    if not keepdims:
        value = np.squeeze(value, axis=ax)

    def vjp():
        def f(g):
            out = np.zeros(a.shape)
            gk = g if keepdims else np.expand_dims(g, ax)
            np.put_along_axis(out, np.expand_dims(idx, ax), gk, axis=ax)
            return (out,)

        return f

    return _make("max", (a,), value, vjp)


def broadcast_to(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        value = np.array(np.broadcast_to(a.data, shape))
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} to {shape}") from exc
    return _make("broadcast", (a,), value, lambda: lambda g: (_unbroadcast(g, a.shape),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        value = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {a.shape} to {tuple(shape)}") from exc
    return _make("reshape", (a,), value, lambda: lambda g: (g.reshape(a.shape),))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, np.integer)) or i is Ellipsis or i is None for i in items)


def getitem(a, index) -> Tensor:
    """Indexing/slicing; advanced indices accumulate gradients at repeats."""
    a = as_tensor(a)
    try:
        value = np.array(a.data[index])
    except IndexError as exc:
        raise ShapeError(str(exc)) from exc
    basic = _is_basic_index(index)

    def vjp():
        def f(g):
            out = np.zeros(a.shape)
            if basic:
                out[index] = g
            else:
                np.add.at(out, index, g)
            return (out,)

        return f

    return _make("slice", (a,), value, vjp)


def stop_gradient(a) -> Tensor:
    """Detached copy: same value, treated as a constant."""
    return Tensor(np.array(as_tensor(a).data))
