"""Reverse-mode automatic differentiation over dense numpy arrays.

Every operation needed by the streaming attention model is provided as a
differentiable primitive: elementwise arithmetic, matmul, the usual
nonlinearities, reductions, slicing/concat, masked fill, and the scan
operations (cumulative sum, exclusive cumulative product, moving sum,
1D convolution) that let the monotonic alignment recursion run in
vectorized form over frames.

Arithmetic is 64-bit. Graphs are plain DAGs built eagerly; ``backward``
runs a topological sweep from a scalar root and accumulates into ``grad``
of every reachable tensor that requires gradients.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float64

_node_ids = itertools.count()
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (forward values only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Dense float64 array with optional gradient tracking.

    ``data`` is the value, ``grad`` the accumulated gradient (allocated on
    first use), ``node_id`` a creation-order identity that also fixes the
    (deterministic) backward ordering among independent nodes.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd", "node_id")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad and _grad_enabled
        self._parents = ()
        self._bwd = None
        self.node_id = next(_node_ids)

    # --- basic introspection ---

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # --- operator sugar ---

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

    def __pow__(self, exponent):
        return pow_const(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])


def param(data, rng=None, shape=None, scale=None):
    """Create a leaf parameter tensor (requires_grad=True).

    Either pass explicit ``data``, or pass ``rng``+``shape`` for uniform
    fan-in initialization: U(-s, s) with s = scale or 1/sqrt(fan_in).
    """
    if data is None:
        fan_in = shape[0] if len(shape) > 1 else shape[0]
        s = scale if scale is not None else 1.0 / np.sqrt(max(1, fan_in))
        data = rng.uniform(-s, s, size=shape)
    t = Tensor(np.array(data, dtype=DTYPE, copy=True))
    t.requires_grad = True
    return t


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, bwd):
    """Build an op output; skips graph bookkeeping when grads are off."""
    if not _grad_enabled or not any(p.requires_grad for p in parents):
        return Tensor(data)
    out = Tensor(data)
    out.requires_grad = True
    out._parents = tuple(parents)
    out._bwd = bwd
    return out


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _accum(t, g):
    if not t.requires_grad:
        return
    g = _unbroadcast(g, t.data.shape)
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


# --- backward pass ---


def backward(root):
    """Backpropagate from a scalar root.

    Leaf gradients accumulate across calls until zeroed; gradients of
    interior nodes are reset at the start of each call.
    """
    if root.data.size != 1:
        raise ValueError(f"backward root must be scalar, got shape {root.data.shape}")
    if not root.requires_grad:
        return

    order = _toposort(root)
    for node in order:
        if node._parents:
            node.grad = None
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._bwd is not None and node.grad is not None:
            node._bwd(node.grad)


def _toposort(root):
    """Iterative postorder over the DAG (leaves first, root last)."""
    order = []
    seen = {id(root)}
    stack = [(root, iter(root._parents))]
    while stack:
        node, it = stack[-1]
        advanced = False
        for p in it:
            if p.requires_grad and id(p) not in seen:
                seen.add(id(p))
                stack.append((p, iter(p._parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    return order


def zero_grads(params):
    for t in params.values() if isinstance(params, dict) else params:
        t.grad = None


# --- elementwise arithmetic ---


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = _make(a.data + b.data, (a, b), None)
    if out._parents:
        out._bwd = lambda g: (_accum(a, g), _accum(b, g))
    return out


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = _make(a.data - b.data, (a, b), None)
    if out._parents:
        out._bwd = lambda g: (_accum(a, g), _accum(b, -g))
    return out


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = _make(a.data * b.data, (a, b), None)
    if out._parents:
        out._bwd = lambda g: (_accum(a, g * b.data), _accum(b, g * a.data))
    return out


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = _make(a.data / b.data, (a, b), None)
    if out._parents:
        out._bwd = lambda g: (
            _accum(a, g / b.data),
            _accum(b, -g * a.data / (b.data * b.data)),
        )
    return out


def neg(a):
    a = as_tensor(a)
    out = _make(-a.data, (a,), None)
    if out._parents:
        out._bwd = lambda g: _accum(a, -g)
    return out


def pow_const(a, exponent):
    a = as_tensor(a)
    e = float(exponent)
    out = _make(a.data**e, (a,), None)
    if out._parents:
        out._bwd = lambda g: _accum(a, g * e * a.data ** (e - 1.0))
    return out


# --- nonlinearities ---


def sigmoid(x):
    x = as_tensor(x)
    d = x.data
    y = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    out = _make(y, (x,), None)
    if out._parents:
        out._bwd = lambda g: _accum(x, g * y * (1.0 - y))
    return out


def tanh(x):
    x = as_tensor(x)
    y = np.tanh(x.data)
    out = _make(y, (x,), None)
    if out._parents:
        out._bwd = lambda g: _accum(x, g * (1.0 - y * y))
    return out


def relu(x):
    """max(0, x); subgradient at 0 is 0."""
    x = as_tensor(x)
    mask = x.data > 0
    out = _make(x.data * mask, (x,), None)
    if out._parents:
        out._bwd = lambda g: _accum(x, g * mask)
    return out


def exp(x):
    x = as_tensor(x)
    y = np.exp(x.data)
    out = _make(y, (x,), None)
    if out._parents:
        out._bwd = lambda g: _accum(x, g * y)
    return out


def log(x):
    x = as_tensor(x)
    out = _make(np.log(x.data), (x,), None)
    if out._parents:
        out._bwd = lambda g: _accum(x, g / x.data)
    return out


def sqrt(x):
    x = as_tensor(x)
    y = np.sqrt(x.data)
    out = _make(y, (x,), None)
    if out._parents:
        out._bwd = lambda g: _accum(x, g / (2.0 * y))
    return out


def abs_(x):
    """|x|; subgradient at the kink is 0."""
    x = as_tensor(x)
    s = np.sign(x.data)
    out = _make(np.abs(x.data), (x,), None)
    if out._parents:
        out._bwd = lambda g: _accum(x, g * s)
    return out


def clamp(x, lo=None, hi=None):
    """Clip to [lo, hi]; gradient passes only inside the kept range."""
    x = as_tensor(x)
    y = np.clip(x.data, lo, hi)
    mask = np.ones_like(x.data, dtype=bool)
    if lo is not None:
        mask &= x.data >= lo
    if hi is not None:
        mask &= x.data <= hi
    out = _make(y, (x,), None)
    if out._parents:
        out._bwd = lambda g: _accum(x, g * mask)
    return out


# --- reductions ---


def sum_(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), None)
    if out._parents:

        def bwd(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accum(x, np.broadcast_to(g, x.data.shape))

        out._bwd = bwd
    return out


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.data.shape[a] for a in np.atleast_1d(axis)])
    return sum_(x, axis=axis, keepdims=keepdims) * (1.0 / float(n))


def l2_norm(v, eps=1e-12):
    """Euclidean norm of a vector, guarded against the zero vector."""
    return sqrt(sum_(v * v) + eps)


# --- shape ops ---


def reshape(x, shape):
    x = as_tensor(x)
    out = _make(x.data.reshape(shape), (x,), None)
    if out._parents:
        out._bwd = lambda g: _accum(x, g.reshape(x.data.shape))
    return out


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), None)
    if out._parents:
        sizes = [t.data.shape[axis] for t in tensors]
        splits = np.cumsum(sizes)[:-1]

        def bwd(g):
            for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
                _accum(t, piece)

        out._bwd = bwd
    return out


def take(x, idx):
    """Basic/int-array indexing; backward scatter-adds into the source."""
    x = as_tensor(x)
    out = _make(x.data[idx], (x,), None)
    if out._parents:

        def bwd(g):
            gx = np.zeros_like(x.data)
            np.add.at(gx, idx, g)
            _accum(x, gx)

        out._bwd = bwd
    return out


def take_rows(weight, ids):
    """Row gather (embedding lookup): out[..., :] = weight[ids[...], :]."""
    weight = as_tensor(weight)
    ids = np.asarray(ids, dtype=np.int64)
    out = _make(weight.data[ids], (weight,), None)
    if out._parents:

        def bwd(g):
            gw = np.zeros_like(weight.data)
            np.add.at(gw, ids, g)
            _accum(weight, gw)

        out._bwd = bwd
    return out


def masked_fill(x, mask, value):
    """Replace entries where ``mask`` is true by a constant; no gradient flows there."""
    x = as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    out = _make(np.where(mask, value, x.data), (x,), None)
    if out._parents:
        out._bwd = lambda g: _accum(x, g * ~mask)
    return out


# --- matmul ---


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = _make(np.matmul(a.data, b.data), (a, b), None)
    if out._parents:

        def bwd(g):
            if b.data.ndim == 1:
                # (..., n) @ (n,) -> (...,)
                _accum(a, g[..., None] * b.data)
                _accum(b, _unbroadcast((a.data * g[..., None]).reshape(-1, b.data.shape[0]).sum(axis=0), b.data.shape))
            elif a.data.ndim == 1:
                # (n,) @ (n, m) -> (m,)
                _accum(a, np.matmul(b.data, g))
                _accum(b, np.outer(a.data, g))
            else:
                _accum(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape))
                _accum(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape))

        out._bwd = bwd
    return out


# --- softmax family ---


def softmax(x, axis=-1):
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _make(y, (x,), None)
    if out._parents:

        def bwd(g):
            dot = (g * y).sum(axis=axis, keepdims=True)
            _accum(x, y * (g - dot))

        out._bwd = bwd
    return out


def log_softmax(x, axis=-1):
    """Numerically stable log softmax built from primitives.

    The max shift is treated as a constant, which is exact for the
    gradient of log-sum-exp.
    """
    x = as_tensor(x)
    shift = Tensor(x.data.max(axis=axis, keepdims=True))
    z = x - shift
    lse = log(sum_(exp(z), axis=axis, keepdims=True))
    return z - lse


# --- scan operations ---


def cumsum(x, axis=-1):
    x = as_tensor(x)
    out = _make(np.cumsum(x.data, axis=axis), (x,), None)
    if out._parents:

        def bwd(g):
            rev = np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)
            _accum(x, rev)

        out._bwd = bwd
    return out


def cumprod_exclusive(x):
    """Exclusive cumulative product along the last axis.

    out[..., j] = prod_{l < j} x[..., l], with out[..., 0] = 1.

    The gradient is computed by a second (reverse) scan instead of
    dividing by the running product, so inputs containing exact zeros
    are safe:

        grad_x[i] = out[i] * S[i],  S[i] = g[i+1] + x[i+1] * S[i+1]
    """
    x = as_tensor(x)
    T = x.data.shape[-1]
    y = np.ones_like(x.data)
    if T > 1:
        np.cumprod(x.data[..., :-1], axis=-1, out=y[..., 1:])
    out = _make(y, (x,), None)
    if out._parents:

        def bwd(g):
            s = np.zeros_like(g)
            for j in range(T - 2, -1, -1):
                s[..., j] = g[..., j + 1] + x.data[..., j + 1] * s[..., j + 1]
            _accum(x, y * s)

        out._bwd = bwd
    return out


def _window_sum_np(x, back, forward):
    T = x.shape[-1]
    c = np.concatenate([np.zeros(x.shape[:-1] + (1,), dtype=x.dtype), np.cumsum(x, axis=-1)], axis=-1)
    hi = np.minimum(np.arange(T) + forward + 1, T)
    lo = np.maximum(np.arange(T) - back, 0)
    return c[..., hi] - c[..., lo]


def windowed_sum(x, back, forward):
    """Banded sum along the last axis: out[j] = sum_{k=j-back}^{j+forward} x[k].

    Windows truncate at the sequence edges. The adjoint is the same sum
    with the window mirrored.
    """
    if back < 0 or forward < 0:
        raise ValueError("window extents must be non-negative")
    x = as_tensor(x)
    out = _make(_window_sum_np(x.data, back, forward), (x,), None)
    if out._parents:
        out._bwd = lambda g: _accum(x, _window_sum_np(g, forward, back))
    return out


def moving_sum(x, w):
    """Front-window moving sum: out[j] = sum_{k=j}^{min(j+w-1, T)} x[k]."""
    if w < 1:
        raise ValueError(f"window length must be >= 1, got {w}")
    return windowed_sum(x, back=0, forward=w - 1)


def conv1d(x, kernel):
    """Same-length 1D convolution over the second-to-last axis.

    x: (..., T, D); kernel: (k, D, O) with odd k; zero padding of
    floor(k/2) on both sides, stride 1. Position t reads inputs
    t - k//2 .. t + k//2.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    k = kernel.data.shape[0]
    if k % 2 != 1:
        raise ValueError(f"conv kernel size must be odd, got {k}")
    half = k // 2
    T = x.data.shape[-2]
    pad_width = [(0, 0)] * (x.data.ndim - 2) + [(half, half), (0, 0)]
    xp = np.pad(x.data, pad_width)
    y = np.zeros(x.data.shape[:-1] + (kernel.data.shape[2],), dtype=DTYPE)
    for m in range(k):
        y += np.matmul(xp[..., m : m + T, :], kernel.data[m])
    out = _make(y, (x, kernel), None)
    if out._parents:

        def bwd(g):
            gx = np.zeros_like(xp)
            gw = np.zeros_like(kernel.data)
            for m in range(k):
                gx[..., m : m + T, :] += np.matmul(g, kernel.data[m].T)
                seg = xp[..., m : m + T, :]
                gw[m] = np.tensordot(seg.reshape(-1, seg.shape[-1]), g.reshape(-1, g.shape[-1]), axes=(0, 0))
            _accum(x, gx[..., half : half + T, :] if half else gx)
            _accum(kernel, gw)

        out._bwd = bwd
    return out


# --- finite-difference harness ---


@dataclass
class FDReport:
    """Result of comparing analytic gradients against central differences."""

    max_rel_error: float
    worst_param: str = ""
    worst_index: int = -1
    n_checked: int = 0
    failed: bool = False
    message: str = ""
    per_param: dict = field(default_factory=dict)

    def ok(self, tolerance):
        return not self.failed and self.max_rel_error < tolerance


def finite_difference_check(f, params, step=1e-5, zero_floor=1e-6, max_entries_per_param=None, rng=None):
    """Compare analytic gradients of ``f()`` against central differences.

    ``f`` must be a deterministic zero-argument callable returning a scalar
    Tensor built from ``params`` (a name -> Tensor dict). The relative
    error denominator is floored at ``zero_floor``: central differences
    carry ~eps*|f|/step of cancellation noise, so gradients below that
    magnitude cannot be distinguished from zero and must not dominate
    the report. A non-finite value of f is reported as a failure.
    """
    zero_grads(params)
    out = f()
    if not np.isfinite(out.item()):
        return FDReport(max_rel_error=np.inf, failed=True, message="non-finite objective value")
    backward(out)
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for name, t in params.items()}

    report = FDReport(max_rel_error=0.0)
    for name, t in params.items():
        flat = t.data.reshape(-1)
        indices = np.arange(flat.size)
        if max_entries_per_param is not None and flat.size > max_entries_per_param:
            indices = (rng or np.random.default_rng(0)).choice(flat.size, size=max_entries_per_param, replace=False)
        worst = 0.0
        for i in indices:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + step
                f_plus = f().item()
                flat[i] = orig - step
                f_minus = f().item()
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                report.failed = True
                report.message = f"non-finite objective while perturbing {name}[{i}]"
                continue
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = analytic[name].reshape(-1)[i]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), zero_floor)
            report.n_checked += 1
            if rel > worst:
                worst = rel
            if rel > report.max_rel_error:
                report.max_rel_error = rel
                report.worst_param = name
                report.worst_index = int(i)
        report.per_param[name] = worst
    return report
