"""Dense float tensors with tape-based reverse-mode differentiation.

A Tape records the operations of one forward pass as they execute
(define-by-run).  backward() walks the recorded nodes in reverse creation
order, which is already a valid topological order, and accumulates
gradients into the leaf tensors that participated.  Leaves marked frozen
never receive gradients; operations executed while no tape is active are
plain numpy computations with no recording overhead.

Storage defaults to float64.  float32 storage is accepted for anyone who
wants the memory savings, but every documented tolerance assumes float64.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, ParameterError, ShapeError

DEFAULT_DTYPE = np.float64

_ACTIVE_TAPES: list["Tape"] = []


def _active_tape():
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


class _Node:
    """One recorded operation (or leaf) on a tape."""

    __slots__ = ("parents", "backward_fn", "leaf")

    def __init__(self, parents, backward_fn, leaf=None):
        self.parents = parents
        self.backward_fn = backward_fn
        self.leaf = leaf


class Tensor:
    """A numpy array plus the bookkeeping needed to receive gradients."""

    __slots__ = ("data", "grad", "frozen", "name", "node_id", "tape")

    def __init__(self, data, frozen=False, name=None, dtype=None):
        self.data = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        self.grad = None
        self.frozen = bool(frozen)
        self.name = name
        self.node_id = None
        self.tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"

    # Operator sugar; everything routes through the module-level ops so the
    # tape sees a single implementation of each primitive.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def param(data, name=None, frozen=False, dtype=None):
    """Wrap an array as a named parameter tensor."""
    return Tensor(np.array(data, dtype=dtype or DEFAULT_DTYPE), frozen=frozen, name=name)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Recorder for one forward pass.  Use as a context manager."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self.frozen: set[int] = set()

    def __enter__(self):
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _ACTIVE_TAPES.pop()
        if popped is not self:  # pragma: no cover - misuse guard
            raise ContractError("tape context exited out of order")
        return False

    def __len__(self):
        return len(self._nodes)

    def _leaf_id(self, t: Tensor) -> int:
        if t.tape is self and t.node_id is not None:
            return t.node_id
        nid = len(self._nodes)
        self._nodes.append(_Node((), None, leaf=t))
        t.tape = self
        t.node_id = nid
        if t.frozen:
            self.frozen.add(nid)
        return nid

    def _record(self, out: Tensor, inputs, backward_fn):
        parents = tuple(self._leaf_id(t) for t in inputs)
        nid = len(self._nodes)
        self._nodes.append(_Node(parents, backward_fn))
        out.tape = self
        out.node_id = nid

    def backward(self, loss: Tensor):
        """Accumulate d(loss)/d(leaf) into every reachable non-frozen leaf."""
        if loss.tape is not self or loss.node_id is None:
            raise ContractError("backward target was not recorded on this tape")
        if loss.data.size != 1:
            raise ContractError(
                f"backward requires a scalar loss, got shape {loss.data.shape}"
            )
        grads: dict[int, np.ndarray] = {
            loss.node_id: np.ones_like(loss.data)
        }
        for nid in range(loss.node_id, -1, -1):
            g = grads.pop(nid, None)
            if g is None:
                continue
            node = self._nodes[nid]
            if node.backward_fn is None:
                leaf = node.leaf
                if nid in self.frozen or leaf is None:
                    continue
                leaf.grad = g if leaf.grad is None else leaf.grad + g
                continue
            parent_grads = node.backward_fn(g)
            for pid, pg in zip(node.parents, parent_grads):
                if pg is None:
                    continue
                acc = grads.get(pid)
                grads[pid] = pg if acc is None else acc + pg


def backward(loss: Tensor):
    """Run reverse-mode accumulation from a recorded scalar loss."""
    if loss.tape is None:
        raise ContractError("backward target was not recorded on any tape")
    loss.tape.backward(loss)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _emit(out_data, inputs, backward_fn):
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None:
        tape._record(out, inputs, backward_fn)
    return out


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data
    ash, bsh = a.data.shape, b.data.shape

    def bw(g):
        return _unbroadcast(g, ash), _unbroadcast(g, bsh)

    return _emit(out_data, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data
    ash, bsh = a.data.shape, b.data.shape

    def bw(g):
        return _unbroadcast(g, ash), _unbroadcast(-g, bsh)

    return _emit(out_data, (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _emit(ad * bd, (a, b), bw)


def neg(x):
    x = as_tensor(x)
    return _emit(-x.data, (x,), lambda g: (-g,))


def scale(x, c):
    """Multiply by a python scalar constant."""
    x = as_tensor(x)
    c = float(c)
    return _emit(x.data * c, (x,), lambda g: (g * c,))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(
            f"matmul needs operands with ndim >= 2, got {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions disagree: {a.data.shape} @ {b.data.shape}"
        )
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _emit(ad @ bd, (a, b), bw)


def transpose(x, axes=None):
    """Permute axes; by default swap the trailing two."""
    x = as_tensor(x)
    if x.data.ndim < 2:
        raise ShapeError(f"transpose needs ndim >= 2, got shape {x.data.shape}")
    if axes is None:
        out_data = np.swapaxes(x.data, -1, -2)

        def bw(g):
            return (np.swapaxes(g, -1, -2),)

    else:
        axes = tuple(axes)
        inverse = tuple(np.argsort(axes))
        out_data = np.transpose(x.data, axes)

        def bw(g):
            return (np.transpose(g, inverse),)

    return _emit(out_data, (x,), bw)


def reshape(x, shape):
    x = as_tensor(x)
    orig = x.data.shape
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(orig),))


def broadcast_to(x, shape):
    x = as_tensor(x)
    orig = x.data.shape
    out_data = np.broadcast_to(x.data, shape).copy()
    return _emit(out_data, (x,), lambda g: (_unbroadcast(g, orig),))


def concat(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ParameterError("concat needs at least one tensor")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _emit(out_data, tuple(tensors), bw)


def slice_axis(x, axis, start, stop):
    """Take the half-open range [start, stop) along one axis."""
    x = as_tensor(x)
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    orig = x.data.shape

    def bw(g):
        full = np.zeros(orig, dtype=g.dtype)
        full[index] = g
        return (full,)

    return _emit(x.data[index].copy(), (x,), bw)


def tensor_sum(x):
    x = as_tensor(x)
    shape = x.data.shape
    dtype = x.data.dtype
    return _emit(
        np.asarray(x.data.sum(), dtype=dtype),
        (x,),
        lambda g: (np.broadcast_to(g, shape).astype(dtype, copy=True),),
    )


def mean(x):
    x = as_tensor(x)
    shape = x.data.shape
    dtype = x.data.dtype
    n = x.data.size
    return _emit(
        np.asarray(x.data.mean(), dtype=dtype),
        (x,),
        lambda g: (np.broadcast_to(g / n, shape).astype(dtype, copy=True),),
    )


def log(x):
    x = as_tensor(x)
    xd = x.data
    return _emit(np.log(xd), (x,), lambda g: (g / xd,))


def clamp(x, lo, hi):
    """Clip into [lo, hi]; gradient passes through only where unclipped."""
    x = as_tensor(x)
    mask = (x.data >= lo) & (x.data <= hi)
    return _emit(np.clip(x.data, lo, hi), (x,), lambda g: (g * mask,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x):
    """tanh-approximation gaussian error linear unit."""
    x = as_tensor(x)
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd**3)
    t = np.tanh(inner)
    out_data = 0.5 * xd * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd**2)
        dx = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t**2) * dinner
        return (g * dx,)

    return _emit(out_data, (x,), bw)


def softmax(x, axis=-1):
    """Shift-stabilised softmax along one axis."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - dot) * y,)

    return _emit(y, (x,), bw)


def layernorm(x, gain, bias, eps=1e-5):
    """Normalise the last axis to zero mean, unit variance, then affine."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    var = (centered**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out_data = xhat * gain.data + bias.data
    gshape, bshape = gain.data.shape, bias.data.shape
    gd = gain.data

    def bw(g):
        dgain = _unbroadcast(g * xhat, gshape)
        dbias = _unbroadcast(g, bshape)
        dxhat = g * gd
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = (dxhat - m1 - xhat * m2) * inv
        return dx, dgain, dbias

    return _emit(out_data, (x, gain, bias), bw)


def dropout(x, p, training, rng=None):
    """Inverted dropout: zero with probability p and rescale by 1/(1-p)."""
    x = as_tensor(x)
    if not 0.0 <= p < 1.0:
        raise ParameterError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ParameterError("dropout in training mode requires an rng")
    keep = (rng.random(x.data.shape) >= p) / (1.0 - p)
    return _emit(x.data * keep, (x,), lambda g: (g * keep,))
