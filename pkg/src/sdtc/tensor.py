"""Dense tensors with a reverse-mode differentiation tape.

Values are numpy arrays (row-major, rank >= 1). Operations executed while a
:class:`Tape` is active record a node whenever at least one operand is tracked
(a ``requires_grad`` leaf or the output of an earlier recorded op). Outside a
tape every op is a plain numpy computation, which is the inference fast path.

    >>> w = Tensor([[1.0, 2.0]], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (w * w).sum()
    >>> tape.backward(loss)[w]
    array([[2., 4.]])
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand extents are incompatible."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


_DTYPES = {"float32": np.float32, "float64": np.float64}
_local = threading.local()
# op names whose adjoints are deliberately perturbed (negative-control hook)
_faulty_ops: set[str] = set()


def default_dtype():
    return getattr(_local, "dtype", np.float32)


@contextlib.contextmanager
def precision(name: str):
    """Temporarily switch the dtype used for newly created tensors."""
    if name not in _DTYPES:
        raise ContractError(f"unknown precision {name!r}")
    prev = default_dtype()
    _local.dtype = _DTYPES[name]
    try:
        yield
    finally:
        _local.dtype = prev


@contextlib.contextmanager
def faulty_adjoint(op: str):
    """Scale the adjoint of ``op`` by 1.01 while active. Test hook only."""
    _faulty_ops.add(op)
    try:
        yield
    finally:
        _faulty_ops.discard(op)


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(default_dtype())
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.size == 0:
            raise DimensionError(f"tensor must have at least one element, got shape {arr.shape}")
        arr = np.ascontiguousarray(arr)
        if arr.flags.writeable and arr.base is None:
            arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.node: _Node | None = None

    # -- metadata -----------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self):
        tag = ", taped" if self.node is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # -- operators ----------------------------------------------------------
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

    def __pow__(self, p):
        if isinstance(p, Tensor):
            raise ContractError("only scalar exponents are supported")
        return power(self, float(p))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


class _Node:
    __slots__ = ("tape", "index", "parents", "fn", "op", "leaf")

    def __init__(self, tape, index, parents, fn, op, leaf=None):
        self.tape = tape
        self.index = index
        self.parents = parents
        self.fn = fn
        self.op = op
        self.leaf = leaf


class Gradients:
    """Adjoints of the leaves of one tape, looked up by tensor."""

    def __init__(self, entries: dict[int, tuple[Tensor, np.ndarray]]):
        self._entries = entries

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        try:
            return self._entries[id(tensor)][1]
        except KeyError:
            raise KeyError(f"no gradient recorded for {tensor!r}") from None

    def __contains__(self, tensor) -> bool:
        return id(tensor) in self._entries

    def __len__(self):
        return len(self._entries)

    def get(self, tensor, default=None):
        entry = self._entries.get(id(tensor))
        return default if entry is None else entry[1]

    def items(self):
        return list(self._entries.values())


class Tape:
    """Record of primitive operations for one forward pass.

    A tape may be consumed by :meth:`backward` exactly once.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._leaves: dict[int, _Node] = {}
        self._consumed = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def watch(self, tensors: Iterable[Tensor]) -> None:
        """Register tensors as leaves so they receive an adjoint even if unused."""
        for t in tensors:
            self._leaf(t)

    def _leaf(self, t: Tensor) -> _Node:
        node = self._leaves.get(id(t))
        if node is None:
            node = _Node(self, len(self.nodes), (), None, "leaf", leaf=t)
            self.nodes.append(node)
            self._leaves[id(t)] = node
        return node

    def _node_for(self, t: Tensor) -> _Node | None:
        if t.node is not None:
            if t.node.tape is not self:
                raise ContractError("tensor belongs to a different tape")
            return t.node
        if t.requires_grad:
            return self._leaf(t)
        return None

    def backward(self, loss: Tensor) -> Gradients:
        if self._consumed:
            raise ContractError("backward already ran on this tape; re-run the forward pass")
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.node is None or loss.node.tape is not self:
            raise ContractError("loss is not recorded on this tape")
        self._consumed = True
        adj: list[np.ndarray | None] = [None] * len(self.nodes)
        adj[loss.node.index] = np.ones_like(loss.data)
        for node in reversed(self.nodes[: loss.node.index + 1]):
            g = adj[node.index]
            if g is None or node.leaf is not None:
                continue
            parent_grads = node.fn(g)
            if node.op in _faulty_ops:
                parent_grads = [None if pg is None else pg * 1.01 for pg in parent_grads]
            for parent, pg in zip(node.parents, parent_grads):
                if parent is None or pg is None:
                    continue
                if adj[parent.index] is None:
                    adj[parent.index] = pg
                else:
                    adj[parent.index] = adj[parent.index] + pg
            adj[node.index] = None
            node.fn = None
        out = {}
        for key, node in self._leaves.items():
            g = adj[node.index]
            if g is None:
                g = np.zeros_like(node.leaf.data)
            out[key] = (node.leaf, np.asarray(g, dtype=node.leaf.dtype).reshape(node.leaf.shape))
        return Gradients(out)


def backward(loss: Tensor) -> Gradients:
    if loss.node is None:
        raise ContractError("loss is not taped")
    return loss.node.tape.backward(loss)


# ---------------------------------------------------------------------------
# recording helpers


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _record(data: np.ndarray, parents: Sequence[Tensor], fn: Callable, op: str) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is None:
        return out
    pnodes = tuple(tape._node_for(p) for p in parents)
    if all(n is None for n in pnodes):
        return out
    node = _Node(tape, len(tape.nodes), pnodes, fn, op)
    tape.nodes.append(node)
    out.node = node
    return out


def _needs(t: Tensor) -> bool:
    return t.node is not None or t.requires_grad


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


def _binary(a, b):
    if not isinstance(a, Tensor):
        a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    if not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    _broadcast_shape(a, b)
    return a, b


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _binary(a, b)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _binary(a, b)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _binary(a, b)
    ad, bd = a.data, b.data

    def fn(g):
        ga = _unbroadcast(g * bd, ad.shape) if _needs(a) else None
        gb = _unbroadcast(g * ad, bd.shape) if _needs(b) else None
        return ga, gb

    return _record(ad * bd, (a, b), fn, "mul")


def div(a, b) -> Tensor:
    a, b = _binary(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def fn(g):
        ga = _unbroadcast(g / bd, ad.shape) if _needs(a) else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if _needs(b) else None
        return ga, gb

    return _record(out, (a, b), fn, "div")


def power(x: Tensor, p: float) -> Tensor:
    xd = x.data
    return _record(xd ** p, (x,), lambda g: (g * p * xd ** (p - 1),), "power")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _record(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _record(np.log(xd), (x,), lambda g: (g / xd,), "log")


def abs_(x: Tensor) -> Tensor:
    xd = x.data
    return _record(np.abs(xd), (x,), lambda g: (g * np.sign(xd),), "abs")


def relu(x: Tensor) -> Tensor:
    xd = x.data
    return _record(np.maximum(xd, 0), (x,), lambda g: (g * (xd > 0),), "relu")


def sigmoid(x: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-x.data))
    return _record(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-form GELU."""
    xd = x.data
    sq = xd * xd
    th = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * sq))
    out = 0.5 * xd * (1.0 + th)

    def fn(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * sq)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th ** 2) * dinner),)

    return _record(out, (x,), fn, "gelu")


def where(mask, a, b) -> Tensor:
    """Select ``a`` where the constant boolean ``mask`` holds, else ``b``."""
    mask = np.asarray(mask, dtype=bool)
    a, b = _binary(a, b)
    try:
        shape = np.broadcast_shapes(mask.shape, a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast mask {mask.shape} with {a.shape}, {b.shape}") from None
    sa, sb = a.shape, b.shape
    out = np.where(mask, a.data, b.data)

    def fn(g):
        ga = _unbroadcast(np.where(mask, g, 0), sa) if _needs(a) else None
        gb = _unbroadcast(np.where(mask, 0, g), sb) if _needs(b) else None
        return ga, gb

    return _record(np.broadcast_to(out, shape), (a, b), fn, "where")


# ---------------------------------------------------------------------------
# reductions and normalisations


def _axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _axes(axis, x.ndim)
    shape = x.shape
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def fn(g):
        if not keepdims:
            g = np.expand_dims(g.reshape(out.shape), axes)
        return (np.broadcast_to(g, shape),)

    return _record(out, (x,), fn, "sum")


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _axes(axis, x.ndim)
    n = math.prod(x.shape[a] for a in axes)
    return mul(sum_(x, axes, keepdims), 1.0 / n)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ContractError(f"softmax axis {axis} out of range for rank {x.ndim}")
    xd = x.data
    if not np.isfinite(xd).all():
        raise NumericError("softmax input contains non-finite values")
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, (x,), fn, "softmax")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul batch extents differ: {a.shape} @ {b.shape}") from None
    ad, bd = a.data, b.data

    def fn(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if _needs(a) else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if _needs(b) else None
        return ga, gb

    return _record(ad @ bd, (a, b), fn, "matmul")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Stride-1, zero-padded ``same`` cross-correlation over ``(..., C_in, H, W)``.

    ``w`` has shape ``(C_out, C_in, k, k)`` with odd ``k``.
    """
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise DimensionError(f"conv kernel must be (C_out, C_in, k, k), got {w.shape}")
    k = w.shape[2]
    if k % 2 == 0:
        raise ContractError(f"conv kernel size must be odd, got {k}")
    if x.ndim < 3 or x.shape[-3] != w.shape[1]:
        raise DimensionError(f"conv input {x.shape} does not match kernel {w.shape}")
    c_out, c_in = w.shape[:2]
    *lead, _, h, wd = x.shape
    pad = (k - 1) // 2
    xd = x.data.reshape(-1, c_in, h, wd)
    n = xd.shape[0]
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))  # n,cin,h,w,k,k
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, h * wd, c_in * k * k)
    wmat = w.data.reshape(c_out, -1)
    out = (cols @ wmat.T).transpose(0, 2, 1)  # n, c_out, hw
    if b is not None:
        out = out + b.data[:, None]
    out = out.reshape(*lead, c_out, h, wd)

    def fn(g):
        g2 = g.reshape(n, c_out, h * wd)
        gw = (g2 @ cols).sum(axis=0).reshape(w.shape) if _needs(w) else None
        gx = None
        if _needs(x):
            gcols = (np.swapaxes(g2, 1, 2) @ wmat).reshape(n, h, wd, c_in, k, k)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + h, j:j + wd] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad:pad + h, pad:pad + wd].reshape(x.shape)
        grads = [gx, gw]
        if b is not None:
            grads.append(g2.sum(axis=(0, 2)) if _needs(b) else None)
        return tuple(grads)

    parents = (x, w) if b is None else (x, w, b)
    return _record(out, parents, fn, "conv2d")


# ---------------------------------------------------------------------------
# layout


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} into {shape}") from None
    src = x.shape
    return _record(out, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(a % x.ndim for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"invalid permutation {axes} for rank {x.ndim}")
    inv = tuple(np.argsort(axes))
    return _record(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0]
    axis = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != axis
        ):
            raise DimensionError(
                f"concat along axis {axis} needs matching extents, got {ref.shape} and {t.shape}"
            )
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _record(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % (tensors[0].ndim + 1)
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis)


def slice_(x: Tensor, index) -> Tensor:
    out = x.data[index]
    if not isinstance(out, np.ndarray) or out.ndim == 0:
        out = np.asarray(out).reshape(1)
    if out.size == 0:
        raise DimensionError(f"slice {index!r} of {x.shape} is empty")
    shape, dtype = x.shape, x.dtype

    basic = _is_basic_index(index)

    def fn(g):
        full = np.zeros(shape, dtype=dtype)
        g = g.reshape(x.data[index].shape)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _record(out, (x,), fn, "slice")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice, type(None))) or i is Ellipsis for i in items)
