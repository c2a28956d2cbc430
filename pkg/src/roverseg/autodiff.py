"""Reverse-mode autodiff over float64 numpy arrays.

Tensors form a DAG through parent references; each op attaches a closure that
scatters the output gradient into its inputs.  ``backward`` walks reachable
nodes in descending creation order (a valid reverse topological order since
children are always created after their parents) and accumulates gradients
additively, so shared subexpressions are handled naturally.

Tensors are treated as immutable once created except by the optimizer
(which updates parameter ``data`` in place between graph builds) and by
``grad_check`` (which perturbs the probe point between evaluations).
"""

from itertools import count

import numpy as np

from . import kernels
from .errors import DegenerateInputError, DomainError, ShapeError

_ids = count()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backprop", "_id")

    def __init__(self, data, requires_grad=False, parents=(), backprop=None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = tuple(parents)
        self._backprop = backprop
        self._id = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def constant(data):
    return Tensor(data)


def parameter(data):
    return Tensor(data, requires_grad=True)


def _accum(t, g):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _make(data, inputs, backprop):
    if any(t.requires_grad for t in inputs):
        return Tensor(data, requires_grad=True, parents=inputs, backprop=backprop)
    return Tensor(data)


def backward(root):
    if root.data.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.data.shape}")
    if not root.requires_grad:
        raise DegenerateInputError("backward on a tensor with requires_grad=False")
    seen = {root._id}
    stack = [root]
    nodes = []
    while stack:
        n = stack.pop()
        nodes.append(n)
        for p in n._parents:
            if p.requires_grad and p._id not in seen:
                seen.add(p._id)
                stack.append(p)
    nodes.sort(key=lambda n: n._id, reverse=True)
    root.grad = np.ones_like(root.data)
    for n in nodes:
        if n._backprop is not None and n.grad is not None:
            n._backprop(n.grad)


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------


def conv2d(x, kernel, bias, stride=1, padding=0):
    if x.data.ndim != 3 or kernel.data.ndim != 4 or bias.data.ndim != 1:
        raise ShapeError("conv2d expects x (C,H,W), kernel (O,I,kh,kw), bias (O,)")
    cout, cin, kh, kw = kernel.shape
    if x.shape[0] != cin:
        raise ShapeError(f"conv2d channel mismatch: x has {x.shape[0]}, kernel wants {cin}")
    if bias.shape[0] != cout:
        raise ShapeError(f"conv2d bias length {bias.shape[0]} != {cout} output channels")
    if not (isinstance(stride, int) and stride >= 1):
        raise ShapeError(f"conv2d stride must be a positive int, got {stride!r}")
    if not (isinstance(padding, int) and padding >= 0):
        raise ShapeError(f"conv2d padding must be a non-negative int, got {padding!r}")
    ho, wo = kernels.conv_output_hw(x.shape[1], x.shape[2], kh, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output would be empty for input {x.shape} kernel {kernel.shape}")
    y = kernels.conv2d_forward(x.data, kernel.data, bias.data, stride, padding)
    x_hw = (x.shape[1], x.shape[2])

    def bp(g):
        if x.requires_grad:
            _accum(x, kernels.conv2d_backward_input(g, kernel.data, x_hw, stride, padding))
        if kernel.requires_grad:
            _accum(kernel, kernels.conv2d_backward_kernel(g, x.data, kh, kw, stride, padding))
        if bias.requires_grad:
            _accum(bias, g.sum(axis=(1, 2)))

    return _make(y, (x, kernel, bias), bp)


def upsample_nearest(x, factor):
    if x.data.ndim != 3:
        raise ShapeError("upsample_nearest expects (C,H,W)")
    if not (isinstance(factor, int) and factor >= 1):
        raise ShapeError(f"upsample factor must be a positive int, got {factor!r}")
    c, h, w = x.shape
    y = np.repeat(np.repeat(x.data, factor, axis=1), factor, axis=2)

    def bp(g):
        _accum(x, g.reshape(c, h, factor, w, factor).sum(axis=(2, 4)))

    return _make(y, (x,), bp)


def relu(x):
    y = np.maximum(x.data, 0.0)

    def bp(g):
        # subgradient 0 at the kink
        _accum(x, g * (x.data > 0.0))

    return _make(y, (x,), bp)


def add(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch {a.shape} vs {b.shape}")

    def bp(g):
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, g)

    return _make(a.data + b.data, (a, b), bp)


def mul(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch {a.shape} vs {b.shape}")

    def bp(g):
        if a.requires_grad:
            _accum(a, g * b.data)
        if b.requires_grad:
            _accum(b, g * a.data)

    return _make(a.data * b.data, (a, b), bp)


def scale(x, s):
    s = float(s)
    if not np.isfinite(s):
        raise DomainError(f"scale by non-finite {s!r}")

    def bp(g):
        _accum(x, g * s)

    return _make(x.data * s, (x,), bp)


def tsum(x):
    def bp(g):
        _accum(x, np.broadcast_to(g, x.shape))

    return _make(x.data.sum(), (x,), bp)


def tmean(x):
    n = x.size

    def bp(g):
        _accum(x, np.broadcast_to(g / n, x.shape))

    return _make(x.data.mean(), (x,), bp)


def exp(x):
    with np.errstate(over="ignore"):  # overflow becomes DomainError below
        y = np.exp(x.data)
    if not np.all(np.isfinite(y)):
        raise DomainError("exp overflow")

    def bp(g):
        _accum(x, g * y)

    return _make(y, (x,), bp)


def log(x):
    if np.any(x.data <= 0.0):
        raise DomainError("log of non-positive value")
    y = np.log(x.data)

    def bp(g):
        _accum(x, g / x.data)

    return _make(y, (x,), bp)


def softmax_channels(x):
    """Channel-axis softmax of a (C,H,W) map, stabilized by the row max."""
    if x.data.ndim != 3:
        raise ShapeError("softmax_channels expects (C,H,W)")
    m = x.data.max(axis=0, keepdims=True)
    e = np.exp(x.data - m)
    y = e / e.sum(axis=0, keepdims=True)

    def bp(g):
        s = (g * y).sum(axis=0, keepdims=True)
        _accum(x, y * (g - s))

    return _make(y, (x,), bp)


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects 2-D tensors")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dim mismatch {a.shape} vs {b.shape}")
    y = a.data @ b.data

    def bp(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _make(y, (a, b), bp)


def transpose(x):
    if x.data.ndim != 2:
        raise ShapeError("transpose expects a 2-D tensor")

    def bp(g):
        _accum(x, np.ascontiguousarray(g.T))

    return _make(np.ascontiguousarray(x.data.T), (x,), bp)


def reshape(x, shape):
    y = x.data.reshape(shape)

    def bp(g):
        _accum(x, g.reshape(x.shape))

    return _make(y, (x,), bp)


def flatten(x):
    return reshape(x, (x.size,))


def row(x, i):
    if not (0 <= i < x.shape[0]):
        raise ShapeError(f"row {i} out of range for shape {x.shape}")
    y = np.array(x.data[i])

    def bp(g):
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        x.grad[i] += g

    return _make(y, (x,), bp)


def stack_rows(rows):
    if not rows:
        raise DegenerateInputError("stack_rows of an empty list")
    shape = rows[0].shape
    for r in rows[1:]:
        if r.shape != shape:
            raise ShapeError(f"stack_rows shape mismatch {r.shape} vs {shape}")
    y = np.stack([r.data for r in rows])

    def bp(g):
        for j, r in enumerate(rows):
            if r.requires_grad:
                _accum(r, g[j])

    return _make(y, tuple(rows), bp)


def permute(x, idx):
    if x.data.ndim != 1:
        raise ShapeError("permute expects a 1-D tensor")
    idx = np.asarray(idx, dtype=np.int64)
    n = x.size
    if idx.shape != (n,) or not np.array_equal(np.sort(idx), np.arange(n)):
        raise ShapeError("permute index must be a permutation of the input coordinates")
    y = x.data[idx]

    def bp(g):
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        x.grad[idx] += g  # idx entries are unique, fancy-index add is safe

    return _make(y, (x,), bp)


# ---------------------------------------------------------------------------
# finite-difference harness
# ---------------------------------------------------------------------------


def grad_check(f, point, eps=1e-4):
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps the probe tensor to a scalar Tensor and must rebuild its graph
    on every call.  ``point.data`` is perturbed in place one coordinate at a
    time and restored afterwards.  Error metric per coordinate:
    |analytic - numeric| / max(1, |analytic|).
    """
    if not isinstance(point, Tensor) or not point.requires_grad:
        raise DegenerateInputError("grad_check needs a Tensor probe with requires_grad=True")
    eps = float(eps)
    if not (np.isfinite(eps) and eps > 0.0):
        raise DomainError(f"grad_check eps must be positive and finite, got {eps!r}")
    out = f(point)
    if out.data.size != 1:
        raise ShapeError("grad_check target must evaluate to a scalar")
    point.grad = None
    backward(out)
    analytic = np.zeros_like(point.data) if point.grad is None else point.grad.copy()
    numeric = np.empty_like(point.data)
    flat = point.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        fp = f(point).item()
        flat[i] = keep - eps
        fm = f(point).item()
        flat[i] = keep
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise DomainError(f"non-finite evaluation while probing coordinate {i}")
        nflat[i] = (fp - fm) / (2.0 * eps)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max())
