"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Operations record themselves on the active :class:`Tape` when at least one
input requires a gradient.  Outside a tape every operation is a plain numpy
computation, which is what evaluation and decoding use.

    >>> x = Tensor(np.ones(3), requires_grad=True)
    >>> with Tape() as tape:
    ...     y = (x * x).sum()
    >>> tape.backward(y)
    >>> x.grad
    array([2., 2., 2.])
"""
from __future__ import annotations

import threading
import weakref
from typing import Callable, Sequence

import numpy as np

_local = threading.local()

# additive mask value; exp() underflows to exactly 0 in fp32 and fp64
MASK_VALUE = -1e30


class AutogradError(RuntimeError):
    pass


class ShapeError(ValueError):
    pass


class MaskedRowError(AutogradError):
    """Raised when an attention query row has no attendable key."""


class EmptyLossError(ValueError):
    pass


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


class _Node:
    __slots__ = ("parents", "backward", "grad", "op", "tape", "out")

    def __init__(self, parents, backward, op, tape, out):
        self.parents = parents
        self.backward = backward
        self.grad = None
        self.op = op
        self.tape = tape
        self.out = out


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in creation order, so the list is already a
    topological order.  A tape can be consumed by :meth:`backward` once.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise AutogradError("tape stack corrupted")
        stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, root: "Tensor", grad: np.ndarray | None = None) -> None:
        if self.consumed:
            raise AutogradError(
                "backward() already ran on this tape; re-run the forward pass first")
        node = root._node
        if node is None or node.tape is not self:
            raise AutogradError("root tensor was not recorded on this tape")
        if grad is None:
            if root.data.size != 1:
                raise AutogradError("backward() without a seed needs a scalar root")
            grad = np.ones_like(root.data)
        node.grad = np.asarray(grad, dtype=root.data.dtype).reshape(root.data.shape)
        self.consumed = True
        for node in reversed(self.nodes):
            g = node.grad
            if g is None:
                continue
            out = node.out()
            if out is not None:
                out.grad = g
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pnode = parent._node
                if pnode is not None:
                    pnode.grad = pg if pnode.grad is None else pnode.grad + pg
                elif parent.grad is None:
                    parent.grad = np.array(pg, dtype=parent.data.dtype, copy=True)
                else:
                    parent.grad += pg
            node.grad = None
            node.backward = None
        self.nodes = []


class Tensor:
    """Dense array with an optional gradient."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._node = None
        self.name = name

    # --- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        if self._node is None:
            raise AutogradError("tensor has no recorded history")
        self._node.tape.backward(self, grad)

    # --- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    """Wrap ``x``; arrays keep their float dtype, scalars take ``dtype``."""
    if isinstance(x, Tensor):
        return x
    if isinstance(x, np.ndarray) and x.dtype.kind == "f" and dtype is None:
        return Tensor(x)
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def _pair(a, b):
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, as_tensor(b, a.dtype if np.isscalar(b) else None)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return as_tensor(a, b.dtype if np.isscalar(a) else None), b
    return as_tensor(a), as_tensor(b)


def _make(data: np.ndarray, parents: Sequence[Tensor],
          backward: Callable[[np.ndarray], tuple], op: str) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        node = _Node(tuple(parents), backward, op, tape, weakref.ref(out))
        out._node = node
        tape.nodes.append(node)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
                 "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def sigmoid(a: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-a.data))
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def relu2(a: Tensor) -> Tensor:
    """Squared ReLU, ``max(x, 0)^2``; its derivative is continuous."""
    r = np.maximum(a.data, 0)
    return _make(r * r, (a,), lambda g: (2.0 * r * g,), "relu2")


# ---------------------------------------------------------------------------
# shape manipulation

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading dimensions broadcast like ``np.matmul``."""
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {ad.shape} x {bd.shape}")

    if bd.ndim == 2 and ad.ndim > 2:
        # activations times a weight: flatten rows so the weight gradient is one GEMM
        a2 = ad.reshape(-1, ad.shape[-1])

        def backward(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ bd.T).reshape(ad.shape), a2.T @ g2

        return _make((a2 @ bd).reshape(ad.shape[:-1] + bd.shape[-1:]), (a, b), backward, "matmul")

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(ad @ bd, (a, b), backward, "matmul")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,),
                 lambda g: (np.transpose(g, inv),), "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis
               for i in items)


def getitem(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.dtype
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(a.data[index], (a,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if len(tensors) == 1:
        return tensors[0]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


def _row_index(index):
    # a tuple indexes (batch, row) pairs; anything else is a 1-D row index
    return index if isinstance(index, tuple) else np.asarray(index, dtype=np.intp)


def scatter_rows(rows: Tensor, index, n: int) -> Tensor:
    """Zeros with ``n`` rows whose rows ``index`` (unique) are ``rows``.

    ``index`` is a 1-D row index, or a ``(batch, row)`` tuple of index arrays
    for a batched ``(B, n, ...)`` result.
    """
    index = _row_index(index)
    lead = rows.shape[:1] if isinstance(index, tuple) else ()
    out = np.zeros(lead + (n,) + rows.shape[len(lead) + 1:], dtype=rows.dtype)
    out[index] = rows.data
    return _make(out, (rows,), lambda g: (g[index],), "scatter_rows")


def replace_rows(base: Tensor, index, rows: Tensor) -> Tensor:
    """Copy of ``base`` with rows ``index`` (unique) replaced by ``rows``."""
    index = _row_index(index)
    out = base.data.copy()
    out[index] = rows.data

    def backward(g):
        gb = g.copy()
        gb[index] = 0
        return gb, g[index]

    return _make(out, (base, rows), backward, "replace_rows")


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.intp)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range [0, {table.shape[0]})")
    shape, dtype = table.shape, table.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, ids, g)
        return (full,)

    return _make(table.data[ids], (table,), backward, "embedding")


def stop_gradient(a: Tensor) -> Tensor:
    return Tensor(a.data)


class no_grad:
    """Suspend recording for the enclosed block."""

    def __enter__(self):
        _tape_stack().append(None)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False


# ---------------------------------------------------------------------------
# reductions and normalisation

def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape
    count = a.data.size if axis is None else int(np.prod(
        [shape[i] for i in np.atleast_1d(axis)]))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _make(np.mean(a.data, axis=axis, keepdims=keepdims), (a,), backward, "mean")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (a,), backward, "softmax")


def rmsnorm(x: Tensor, weight: Tensor, eps: float = 1e-6) -> Tensor:
    xd, wd = x.data, weight.data
    r = 1.0 / np.sqrt(np.mean(xd * xd, axis=-1, keepdims=True) + eps)
    xhat = xd * r
    n = xd.shape[-1]

    def backward(g):
        gw = g * wd
        gx = r * gw - xd * (r * r * r) * np.sum(gw * xd, axis=-1, keepdims=True) / n
        return gx, _unbroadcast(g * xhat, wd.shape)

    return _make(xhat * wd, (x, weight), backward, "rmsnorm")


# ---------------------------------------------------------------------------
# losses

def cross_entropy(logits: Tensor, targets, mask=None, weights=None) -> Tensor:
    """Mean negative log-likelihood over the unmasked rows of ``logits``.

    With ``weights`` the loss is ``sum_i w_i * nll_i`` over rows with nonzero
    weight instead, which lets a batch average per-example means.
    """
    x = logits.data
    n = x.shape[0]
    targets = np.asarray(targets, dtype=np.intp)
    if weights is not None:
        weights = np.asarray(weights, dtype=np.float64)
        mask = weights != 0
    mask = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if targets.shape != (n,) or mask.shape != (n,):
        raise ShapeError(
            f"cross_entropy expects {n} targets and mask entries, got "
            f"{targets.shape} and {mask.shape}")
    count = int(mask.sum())
    if count == 0:
        raise EmptyLossError("every position is masked; the loss is empty")
    rows = np.nonzero(mask)[0]
    w = (np.full(count, 1.0 / count) if weights is None else weights[rows]).astype(x.dtype)
    sub = x[rows]
    shifted = sub - sub.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    nll = logz - shifted[np.arange(count), targets[rows]]
    loss = np.dot(nll, w)

    def backward(g):
        p = np.exp(shifted - logz[:, None])
        p[np.arange(count), targets[rows]] -= 1.0
        full = np.zeros_like(x)
        full[rows] = p * (g * w)[:, None]
        return (full,)

    return _make(np.asarray(loss, dtype=x.dtype), (logits,), backward, "cross_entropy")


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Squared L2 distance ``||a - b||^2`` (summed, not averaged)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    return _make(np.asarray(np.sum(diff * diff), dtype=diff.dtype), (a, b),
                 lambda g: (2.0 * g * diff, -2.0 * g * diff), "mse")


# ---------------------------------------------------------------------------
# attention

def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray):
    """Masked scaled dot-product attention.

    ``q`` is (heads, n_q, d_h); ``k`` and ``v`` are (heads, n_k, d_h); ``mask``
    is a boolean (n_q, n_k) array with True on attendable keys.  A leading
    batch axis is allowed on all three, with a (B, n_q, n_k) mask if it
    differs per example.  Returns the mixed values and the row-stochastic
    probabilities as a plain array.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape[-2:] != (q.shape[-2], k.shape[-2]) or mask.ndim not in (2, 3):
        raise ShapeError(f"attention mask {mask.shape} does not match "
                         f"queries {q.shape[-2]} x keys {k.shape[-2]}")
    dead = ~mask.any(axis=-1)
    if dead.any():
        raise MaskedRowError(
            f"attention rows {np.argwhere(dead).tolist()} have no attendable key")
    if mask.ndim == 3:
        # per-example masks (B, n_q, n_k) against (B, heads, n_q, d_h) queries
        mask = mask[:, None]
    qd, kd, vd = q.data, k.data, v.data
    c = 1.0 / float(np.sqrt(qd.shape[-1]))
    p = qd @ np.swapaxes(kd, -1, -2)
    p *= c
    np.copyto(p, MASK_VALUE, where=~mask)
    p -= p.max(axis=-1, keepdims=True)
    np.exp(p, out=p)
    p /= p.sum(axis=-1, keepdims=True)
    out = p @ vd

    def backward(g):
        gv = np.swapaxes(p, -1, -2) @ g
        gs = g @ np.swapaxes(vd, -1, -2)
        gs -= np.sum(gs * p, axis=-1, keepdims=True)
        gs *= p
        gs *= c
        return gs @ kd, np.swapaxes(gs, -1, -2) @ qd, gv

    return _make(out, (q, k, v), backward, "attention"), p


# ---------------------------------------------------------------------------
# finite differences

def numerical_grad(fn: Callable[[], float], array: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of ``fn`` w.r.t. ``array`` (mutated in place)."""
    grad = np.zeros_like(array, dtype=np.float64)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = fn()
        flat[i] = orig - eps
        fm = fn()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Largest relative error between reverse-mode and central-difference gradients.

    ``fn(*inputs)`` must return a scalar tensor.  Every input with
    ``requires_grad`` is checked.
    """
    for t in inputs:
        t.grad = None
    with Tape() as tape:
        out = fn(*inputs)
    tape.backward(out)

    def value():
        return float(fn(*inputs).data)

    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numerical_grad(value, t.data, eps)
        worst = max(worst, relative_error(analytic, numeric))
    return worst
