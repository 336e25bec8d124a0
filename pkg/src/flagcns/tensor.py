"""Dense/sparse tensors with reverse-mode automatic differentiation.

Every operation returns a new :class:`Tensor` that remembers its parents and
a closure propagating the output gradient back to them.  :func:`backward`
topologically sorts the recorded graph once and walks it in reverse, so each
node is visited exactly once.  All arithmetic is float64 and full-batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

ACTIVATIONS = ("sigmoid", "tanh", "relu", "softmax_rows", "identity")


class NumericError(ArithmeticError):
    """Raised when a forward pass produces NaN or Inf."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = tuple(_parents)
        self._backward = _backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


@dataclass(frozen=True, eq=False)
class SparseMatrix:
    """Compressed-sparse-row matrix; a constant operand for :func:`spmm`."""

    rows: int
    cols: int
    indptr: np.ndarray
    indices: np.ndarray
    values: np.ndarray
    _csr: sp.csr_matrix = field(init=False, repr=False)
    _csr_t: sp.csr_matrix = field(init=False, repr=False)

    def __post_init__(self):
        indptr = np.asarray(self.indptr, dtype=np.int64)
        indices = np.asarray(self.indices, dtype=np.int64)
        values = np.asarray(self.values, dtype=np.float64)
        if indptr.shape != (self.rows + 1,) or indptr[0] != 0:
            raise ValueError("row-pointer array must have rows+1 entries starting at 0")
        if np.any(np.diff(indptr) < 0):
            raise ValueError("row pointers must be nondecreasing")
        if indptr[-1] != len(indices) or len(indices) != len(values):
            raise ValueError("index/value arrays disagree with row pointers")
        if len(indices) and (indices.min() < 0 or indices.max() >= self.cols):
            raise ValueError("column index out of range")
        for r in range(self.rows):
            seg = indices[indptr[r]:indptr[r + 1]]
            if len(seg) > 1 and np.any(np.diff(seg) <= 0):
                raise ValueError(f"column indices of row {r} are not strictly increasing")
        object.__setattr__(self, "indptr", indptr)
        object.__setattr__(self, "indices", indices)
        object.__setattr__(self, "values", values)
        csr = sp.csr_matrix((values, indices, indptr), shape=(self.rows, self.cols))
        object.__setattr__(self, "_csr", csr)
        object.__setattr__(self, "_csr_t", csr.T.tocsr())

    @classmethod
    def from_scipy(cls, m) -> "SparseMatrix":
        m = sp.csr_matrix(m, dtype=np.float64)
        m.sum_duplicates()
        m.sort_indices()
        return cls(m.shape[0], m.shape[1], m.indptr, m.indices, m.data)

    @classmethod
    def identity(cls, n: int) -> "SparseMatrix":
        return cls.from_scipy(sp.identity(n, format="csr"))

    @property
    def shape(self):
        return (self.rows, self.cols)

    @property
    def nnz(self):
        return len(self.indices)

    def to_scipy(self) -> sp.csr_matrix:
        return self._csr

    def to_dense(self) -> np.ndarray:
        return self._csr.toarray()

    def row_ids(self) -> np.ndarray:
        """Row index of every stored entry, aligned with ``indices``."""
        return np.repeat(np.arange(self.rows), np.diff(self.indptr))


def _check_finite(out: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(out)):
        raise NumericError(f"non-finite values produced by {op}")
    return out


# --- elementwise / linear algebra -----------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor(a.data + b.data, _parents=(a, b), _backward=bw, op="add")


def neg(a: Tensor) -> Tensor:
    return Tensor(-a.data, _parents=(a,), _backward=lambda g: (-g,), op="neg")


def scale(a: Tensor, c: float) -> Tensor:
    return Tensor(a.data * c, _parents=(a,), _backward=lambda g: (g * c,), op="scale")


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor(a.data * b.data, _parents=(a, b), _backward=bw, op="mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} x {b.shape}")

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor(a.data @ b.data, _parents=(a, b), _backward=bw, op="matmul")


def spmm(a: SparseMatrix, x: Tensor) -> Tensor:
    """Sparse-dense product ``a @ x``; ``a`` is treated as a constant."""
    if x.data.ndim != 2 or a.cols != x.shape[0]:
        raise ValueError(f"spmm dimension mismatch: {a.shape} x {x.shape}")
    out = np.asarray(a.to_scipy() @ x.data)

    def bw(g):
        return (np.asarray(a._csr_t @ g),)

    return Tensor(out, _parents=(x,), _backward=bw, op="spmm")


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return Tensor(np.concatenate([x.data for x in xs], axis=axis), _parents=tuple(xs), _backward=bw, op="concat")


def mean_stack(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ValueError("mean_stack of an empty list")
    shape = xs[0].shape
    if any(x.shape != shape for x in xs):
        raise ValueError("mean_stack requires identical shapes")
    k = len(xs)
    out = np.sum([x.data for x in xs], axis=0) / k

    def bw(g):
        return tuple(g / k for _ in xs)

    return Tensor(out, _parents=tuple(xs), _backward=bw, op="mean_stack")


def sum_all(a: Tensor) -> Tensor:
    return Tensor(a.data.sum(), _parents=(a,), _backward=lambda g: (np.broadcast_to(g, a.shape).copy(),), op="sum")


# --- activations ------------------------------------------------------------


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softmax_rows(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "identity":
        return x
    if kind == "sigmoid":
        y = _sigmoid(x.data)
        bw = lambda g: (g * y * (1.0 - y),)
    elif kind == "tanh":
        y = np.tanh(x.data)
        bw = lambda g: (g * (1.0 - y * y),)
    elif kind == "relu":
        mask = x.data > 0
        y = x.data * mask
        bw = lambda g: (g * mask,)
    elif kind == "softmax_rows":
        if x.data.ndim != 2:
            raise ValueError("softmax_rows requires a rank-2 input")
        y = _softmax_rows(x.data)
        bw = lambda g: (y * (g - (g * y).sum(axis=1, keepdims=True)),)
    else:
        raise ValueError(f"unknown activation {kind!r}")
    return Tensor(y, _parents=(x,), _backward=bw, op=kind)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    factor = np.where(x.data > 0, 1.0, slope)
    return Tensor(x.data * factor, _parents=(x,), _backward=lambda g: (g * factor,), op="leaky_relu")


# --- gather / segment ops (edge-level attention) -------------------------


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)

    def bw(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    return Tensor(x.data[idx], _parents=(x,), _backward=bw, op="gather_rows")


def segment_sum(x: Tensor, seg: np.ndarray, num_segments: int) -> Tensor:
    seg = np.asarray(seg, dtype=np.int64)
    out = np.zeros((num_segments,) + x.shape[1:])
    np.add.at(out, seg, x.data)
    return Tensor(out, _parents=(x,), _backward=lambda g: (g[seg],), op="segment_sum")


def segment_softmax(x: Tensor, seg: np.ndarray, num_segments: int) -> Tensor:
    """Softmax of the rows of ``x`` within each segment (columnwise)."""
    seg = np.asarray(seg, dtype=np.int64)
    mx = np.full((num_segments,) + x.shape[1:], -np.inf)
    np.maximum.at(mx, seg, x.data)
    e = np.exp(x.data - mx[seg])
    den = np.zeros_like(mx)
    np.add.at(den, seg, e)
    y = e / den[seg]

    def bw(g):
        s = np.zeros_like(mx)
        np.add.at(s, seg, g * y)
        return (y * (g - s[seg]),)

    return Tensor(y, _parents=(x,), _backward=bw, op="segment_softmax")


# --- loss ---------------------------------------------------------------


def masked_cross_entropy(logits: Tensor, labels, node_mask) -> Tensor:
    """Mean negative log-likelihood over the masked rows of ``logits``."""
    idx = np.asarray(node_mask, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("masked_cross_entropy needs a nonempty mask")
    n, c = logits.shape
    if idx.min() < 0 or idx.max() >= n:
        raise ValueError("mask index out of range")
    y = np.asarray(labels, dtype=np.int64)[idx]
    if y.min() < 0 or y.max() >= c:
        raise ValueError("label out of range")
    z = logits.data[idx]
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    loss = float(np.mean(lse - z[np.arange(len(idx)), y]))

    def bw(g):
        p = _softmax_rows(z)
        p[np.arange(len(idx)), y] -= 1.0
        out = np.zeros_like(logits.data)
        np.add.at(out, idx, p * (g / len(idx)))
        return (out,)

    return Tensor(loss, _parents=(logits,), _backward=bw, op="cross_entropy")


# --- reverse sweep --------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Reverse-mode sweep from a scalar ``loss``.

    Returns a map from leaf tensor to gradient.  Leaves listed in ``params``
    but unreachable from ``loss`` get zero arrays.  Gradients are also
    accumulated into each leaf's ``.grad``.
    """
    if loss.data.size != 1:
        raise ValueError("backward requires a scalar loss")
    grads = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            leaves[id(node)] = node
            grads[id(node)] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    out = {}
    for key, leaf in leaves.items():
        g = np.asarray(grads[key], dtype=np.float64).reshape(leaf.shape)
        leaf.grad = g if leaf.grad is None else leaf.grad + g
        out[leaf] = g
    for p in params or ():
        if p not in out:
            out[p] = np.zeros_like(p.data)
    return out


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr: float) -> list[np.ndarray]:
    """In-place ``p -= lr * g``; returns the (same) parameter arrays."""
    if len(params) != len(grads):
        raise ValueError("params/grads length mismatch")
    for p, g in zip(params, grads):
        if np.shape(p) != np.shape(g):
            raise ValueError(f"shape mismatch {np.shape(p)} vs {np.shape(g)}")
        p -= lr * np.asarray(g)
    return list(params)


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=shape or (fan_in, fan_out))


def check_finite(t: Tensor, where: str = "forward") -> Tensor:
    _check_finite(t.data, where)
    return t

