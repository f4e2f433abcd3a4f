"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Operations on tensors that require
gradients record themselves on an implicit tape (each result keeps references
to its parents and a closure computing the parents' gradients).
:meth:`Tensor.backward` walks that tape once in reverse topological order.

Broadcasting between two tensors is limited to leading-batch expansion: the
shorter shape must be a suffix of the longer one (or a scalar). Anything else
raises :class:`ShapeError`. Boolean masks are plain numpy arrays and follow
numpy broadcasting, since they never carry gradients.
"""
from __future__ import annotations

import contextlib
import contextvars
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPE: contextvars.ContextVar = contextvars.ContextVar("ecoperceiver_dtype", default=np.float32)

_GELU_C = float(np.sqrt(2.0 / np.pi))


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class TapeStateError(RuntimeError):
    """The tape is in a state that forbids the requested action."""


def get_default_dtype():
    return _DTYPE.get()


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the precision of newly created tensors.

    The setting is held in a context variable, so threads do not see each
    other's precision changes.

    >>> with default_dtype(np.float64):
    ...     Tensor([1.0]).dtype
    dtype('float64')
    """
    token = _DTYPE.set(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DTYPE.reset(token)


class Tensor:
    """n-dimensional array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "name", "fully_masked", "weights",
                 "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=dtype or get_default_dtype())
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.fully_masked: np.ndarray | None = None
        self.weights: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self._consumed = False

    @classmethod
    def _node(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.fully_masked = None
        out.weights = None
        out._consumed = False
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    # -- autodiff ------------------------------------------------------
    def backward(self):
        """Accumulate d(self)/d(leaf) into ``grad`` of every reachable leaf.

        Leaves are tensors created directly with ``requires_grad=True``.
        Intermediate results do not keep their gradients.
        """
        if self.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise TapeStateError("backward() was already called on this loss; rebuild the graph")
        if not self.requires_grad:
            raise ContractError("loss does not depend on any tensor with requires_grad=True")
        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf: accumulate into an owned, writable buffer
                node.grad = np.array(g, copy=True) if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                pg = _unbroadcast(pg, parent.shape).astype(parent.data.dtype, copy=False)
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            node._consumed = True
            if node._parents:
                node._backward = None
                node._parents = ()

    # -- operators -----------------------------------------------------
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

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _topological_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _check_broadcast(a: tuple, b: tuple, op: str):
    if a == b or a == () or b == ():
        return
    short, long_ = (a, b) if len(a) < len(b) else (b, a)
    if len(short) == len(long_) or long_[len(long_) - len(short):] != short:
        raise ShapeError(f"{op}: shapes {a} and {b} differ beyond leading-batch expansion")


def _lead_sum(x: np.ndarray, n_lead: int) -> np.ndarray:
    # sum over the first n_lead axes; a GEMV is much faster than ndarray.sum here
    rest = x.shape[n_lead:]
    flat = x.reshape(-1, int(np.prod(rest, dtype=np.int64)))
    return (np.ones(flat.shape[0], dtype=x.dtype) @ flat).reshape(rest)


def _last_mean(x: np.ndarray) -> np.ndarray:
    # mean over the last axis, keepdims
    h = x.shape[-1]
    col = np.full((h, 1), 1.0 / h, dtype=x.dtype)
    return (x.reshape(-1, h) @ col).reshape(x.shape[:-1] + (1,))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    lead = g.ndim - len(shape)
    if lead > 0:
        g = _lead_sum(np.ascontiguousarray(g), lead)
    if g.shape != shape:
        g = g.reshape(shape)
    return g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _binary(a, b)
    _check_broadcast(a.shape, b.shape, "add")
    return Tensor._node(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _binary(a, b)
    _check_broadcast(a.shape, b.shape, "sub")
    return Tensor._node(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _binary(a, b)
    _check_broadcast(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data
    return Tensor._node(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a, b) -> Tensor:
    a, b = _binary(a, b)
    _check_broadcast(a.shape, b.shape, "div")
    ad, bd = a.data, b.data
    return Tensor._node(ad / bd, (a, b), lambda g: (g / bd, -g * ad / (bd * bd)))


def _binary(a, b):
    if isinstance(a, Tensor):
        return a, _as_tensor(b, a)
    b = _as_tensor(b)
    return _as_tensor(a, b), b


def neg(x: Tensor) -> Tensor:
    return Tensor._node(-x.data, (x,), lambda g: (-g,))


def power(x: Tensor, exponent: float) -> Tensor:
    xd = x.data
    return Tensor._node(xd ** exponent, (x,), lambda g: (g * exponent * xd ** (exponent - 1),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor._node(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return Tensor._node(np.log(xd), (x,), lambda g: (g / xd,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return Tensor._node(out, (x,), lambda g: (g * (1.0 - out * out),))


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return Tensor._node(out, (x,), backward)


def mask_rows(x: Tensor, keep) -> Tensor:
    """Zero every trailing-axis vector of ``x`` where ``keep`` is false.

    ``keep`` has shape ``x.shape[:-1]``. Zeroing uses ``np.where`` so the
    discarded values never take part in arithmetic.
    """
    keep = np.asarray(keep, dtype=bool)
    if keep.shape != x.shape[:-1]:
        raise ShapeError(f"mask_rows: mask shape {keep.shape} does not match {x.shape[:-1]}")
    k = keep[..., None]
    zero = np.zeros((), dtype=x.dtype)
    return Tensor._node(np.where(k, x.data, zero), (x,), lambda g: (np.where(k, g, zero),))


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------
def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return Tensor._node(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    old = x.shape
    return Tensor._node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(int(i) for i in np.argsort(axes))
    # contiguous copies keep the batched matmuls downstream on the fast path
    return Tensor._node(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                        lambda g: (np.ascontiguousarray(g.transpose(inverse)),))


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, tuple(axes))


def broadcast_to(x: Tensor, shape: tuple) -> Tensor:
    """Expand ``x`` along new leading axes."""
    shape = tuple(shape)
    _check_broadcast(x.shape, shape, "broadcast_to")
    if len(shape) < x.ndim:
        raise ShapeError(f"broadcast_to: cannot shrink {x.shape} to {shape}")
    return Tensor._node(np.broadcast_to(x.data, shape), (x,), lambda g: (g,))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(x: Tensor, index) -> Tensor:
    shape, dtype = x.shape, x.dtype
    basic = _is_basic_index(index)

    def backward(g):
        out = np.zeros(shape, dtype=dtype)
        if basic:
            out[index] = g
        else:
            np.add.at(out, index, g)
        return (out,)

    return Tensor._node(np.array(x.data[index]), (x,), backward)


def concat(tensors: Iterable[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or t.shape[:ax] + t.shape[ax + 1:] != tensors[0].shape[:ax] + tensors[0].shape[ax + 1:]:
            raise ShapeError(f"concat: shapes {[t.shape for t in tensors]} disagree off axis {axis}")
    sizes = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=ax))

    return Tensor._node(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` is ``(..., m, k)``; ``b`` is either ``(k, n)`` (shared across the
    batch) or ``(..., k, n)`` with the same leading axes as ``a``.
    """
    a, b = _binary(a, b)
    ok = a.ndim >= 2 and b.ndim >= 2 and a.shape[-1] == b.shape[-2]
    if ok and b.ndim > 2:
        ok = a.shape[:-2] == b.shape[:-2]
    if not ok:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return Tensor._node(ad @ bd, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else out + bias


def softmax(x: Tensor, mask=None, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with an optional boolean keep-mask.

    Masked entries come out exactly zero. Rows with no unmasked entry return
    all zeros, and the output's ``fully_masked`` attribute (boolean array over
    the non-reduced axes, keepdims layout) flags them.
    """
    z = x.data
    if mask is None:
        shifted = z - z.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        s = e.sum(axis=axis, keepdims=True)
        out = e / s
        full = None
    else:
        keep = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        # masked logits act as -inf: they are excluded from the max and from exp
        floor = np.finfo(z.dtype).min
        m = np.where(keep, z, floor).max(axis=axis, keepdims=True)
        full = ~keep.any(axis=axis, keepdims=True)
        m = np.where(full, 0, m)
        e = np.where(keep, np.exp(np.where(keep, z, m) - m), 0).astype(z.dtype, copy=False)
        s = e.sum(axis=axis, keepdims=True)
        out = e / np.where(full, 1, s)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    result = Tensor._node(out.astype(z.dtype, copy=False), (x,), backward)
    result.fully_masked = full
    return result


def single_query_attention(q: Tensor, k: Tensor, v: Tensor, mask, n_heads: int) -> Tensor:
    """Multi-head attention where each batch row has exactly one query.

    ``q`` is ``(N, H)``; ``k`` and ``v`` are ``(N, L, H)`` with heads laid out
    as contiguous blocks of ``H // n_heads`` channels; ``mask`` is a boolean
    ``(N, L)`` keep-mask. Returns ``(N, H)``. Scaling of ``q`` is left to the
    caller. Rows with no kept key give zeros and are flagged in the result's
    ``fully_masked`` attribute (shape ``(N,)``); the ``weights`` attribute
    holds the ``(N, L, n_heads)`` attention weights.

    Head sums go through one small indicator matmul instead of many tiny
    batched products, which keeps the whole op on large contiguous arrays.
    """
    N, H = q.shape
    if k.shape != v.shape or k.ndim != 3 or k.shape[0] != N or k.shape[2] != H:
        raise ShapeError(f"single_query_attention: q {q.shape}, k {k.shape}, v {v.shape} disagree")
    if H % n_heads:
        raise ShapeError(f"width {H} is not divisible by {n_heads} heads")
    L = k.shape[1]
    keep = np.asarray(mask, dtype=bool)
    if keep.shape != (N, L):
        raise ShapeError(f"mask {keep.shape} does not match ({N}, {L})")
    qd, kd, vd = q.data, k.data, v.data
    heads = np.repeat(np.eye(n_heads, dtype=qd.dtype), H // n_heads, axis=0)  # (H, heads)

    def per_head(x):
        # (N, L, H) -> (N, heads, L): channel sums within each head
        return (x.reshape(-1, H) @ heads).reshape(N, L, n_heads).transpose(0, 2, 1)

    def per_channel(x):
        # (N, heads, L) -> (N, L, H): repeat each head weight over its channels
        return (np.ascontiguousarray(x.transpose(0, 2, 1)).reshape(-1, n_heads) @ heads.T).reshape(N, L, H)

    scores = per_head(kd * qd[:, None, :])
    keep3 = keep[:, None, :]
    full = ~keep.any(axis=1)
    m = np.where(keep3, scores, np.finfo(scores.dtype).min).max(axis=-1, keepdims=True)
    m[full] = 0
    e = np.exp(np.where(keep3, scores - m, -np.inf))
    s = e.sum(axis=-1, keepdims=True)
    s[full] = 1
    w = e / s                                                                 # (N, heads, L)
    w_full = per_channel(w)
    out = np.einsum("nlh,nlh->nh", w_full, vd)

    def backward(g):
        g3 = g[:, None, :]
        dw = per_head(vd * g3)
        dscores = w * (dw - (dw * w).sum(axis=-1, keepdims=True))
        dprod = per_channel(dscores)
        return np.einsum("nlh,nlh->nh", dprod, kd), dprod * qd[:, None, :], w_full * g3

    result = Tensor._node(out, (q, k, v), backward)
    result.fully_masked = full
    result.weights = w.transpose(0, 2, 1)
    return result


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    h = x.shape[-1]
    if h < 1:
        raise ContractError("layer_norm needs a non-empty last axis")
    if gamma.shape != (h,) or beta.shape != (h,):
        raise ShapeError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} do not match width {h}")
    xd = x.data
    centered = xd - _last_mean(xd)
    var = _last_mean(centered * centered)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    gd = gamma.data
    out = xhat * gd + beta.data

    def backward(g):
        lead = g.ndim - 1
        dgamma = _lead_sum(g * xhat, lead)
        dbeta = _lead_sum(np.ascontiguousarray(g), lead)
        dxhat = g * gd
        dx = inv * (dxhat - _last_mean(dxhat) - xhat * _last_mean(dxhat * xhat))
        return dx, dgamma, dbeta

    return Tensor._node(out.astype(xd.dtype, copy=False), (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------
def finite_difference_grad(fn: Callable[[], float], tensor: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of the scalar ``fn()`` w.r.t. ``tensor``.

    ``fn`` must read ``tensor.data`` afresh on every call; entries are
    perturbed in place and restored.
    """
    flat = tensor.data.reshape(-1)
    grad = np.zeros(flat.shape, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(fn())
        flat[i] = orig - h
        down = float(fn())
        flat[i] = orig
        grad[i] = (up - down) / (2 * h)
    return grad.reshape(tensor.shape)


def relative_error(analytic, numeric, floor: float = 1e-3) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps near-zero gradients from turning round-off into huge
    ratios; below it the comparison is effectively absolute.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
