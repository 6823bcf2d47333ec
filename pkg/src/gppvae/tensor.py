"""Dense arrays with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array.  Operations on tensors that
require gradients record a closure computing the vector-Jacobian
product; :meth:`Tensor.backward` walks the recorded graph once in
reverse topological order and accumulates into the ``grad`` buffers of
leaf tensors.  Graphs are single use: the closures are released as the
backward pass consumes them.

Only first-order derivatives are supported.
"""

from contextlib import contextmanager

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from . import _accel, memtrack

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled():
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name
        memtrack.record(arr, name or "tensor")

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def T(self):
        return transpose(self)

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # -- autodiff ------------------------------------------------------
    def backward(self, grad=None):
        """Propagate ``grad`` (default: ones for a scalar) to all leaves."""
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise RuntimeError("grad must be given for non-scalar outputs")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.grad is None:
                    node.grad = np.array(g, dtype=node.data.dtype, copy=True)
                else:
                    node.grad += g
                continue
            pgrads = node._backward(g)
            for p, pg in zip(node._parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                pg = _unbroadcast(np.asarray(pg), p.data.shape).astype(p.data.dtype, copy=False)
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            node._backward = None
            node._parents = ()

    # -- operators -----------------------------------------------------
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

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return take_rows(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def parameter(data, dtype=np.float64, name=None):
    return Tensor(np.array(data, dtype=dtype), requires_grad=True, name=name)


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float64
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data, parents, backward):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def custom_op(data, parents, backward):
    """Wrap ``data`` as the output of a user-defined differentiable op.

    ``backward(g)`` must return one gradient (or ``None``) per parent.
    """
    return _result(data, parents, backward)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a, b):
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    ad, bd = a.data, b.data
    out = ad / bd
    return _result(out, (a, b), lambda g: (g / bd, -g * out / bd))


def neg(a):
    return _result(-a.data, (a,), lambda g: (-g,))


def power(a, p):
    p = float(p)
    ad = a.data
    return _result(ad**p, (a,), lambda g: (g * p * ad ** (p - 1.0),))


def square(a):
    ad = a.data
    return _result(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def exp(a):
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a):
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,))


def sin(a):
    ad = a.data
    return _result(np.sin(ad), (a,), lambda g: (g * np.cos(ad),))


def cos(a):
    ad = a.data
    return _result(np.cos(ad), (a,), lambda g: (-g * np.sin(ad),))


def sigmoid(a):
    out = _sigmoid(a.data)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),))


def _sigmoid(x):
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(a):
    ad = a.data
    out = np.logaddexp(0.0, ad).astype(ad.dtype, copy=False)
    return _result(out, (a,), lambda g: (g * _sigmoid(ad),))


def relu(a):
    ad = a.data
    mask = ad > 0
    return _result(np.where(mask, ad, 0).astype(ad.dtype, copy=False), (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    ad = a.data
    out = np.sum(ad, axis=axis, keepdims=keepdims, dtype=np.float64).astype(ad.dtype, copy=False)
    shape = ad.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _result(out, (a,), backward)


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.data.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / float(n))


def transpose(a, axes=None):
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _result(out, (a,), lambda g: (np.transpose(g, inv),))


def reshape(a, shape):
    orig = a.data.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def broadcast_to(a, shape):
    return _result(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (g,))


def take(a, idx, axis=0):
    """Gather entries ``idx`` (integer array or slice) along ``axis``."""
    if isinstance(idx, slice):
        idx = np.arange(a.data.shape[axis])[idx]
    idx = np.asarray(idx)
    shape = a.data.shape
    key = (slice(None),) * axis + (idx,)

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, key, g)
        return (full,)

    return _result(a.data[key], (a,), backward)


def take_rows(a, idx):
    return take(a, idx, axis=0)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


# ---------------------------------------------------------------------------
# linear algebra and layers
# ---------------------------------------------------------------------------


def matmul(a, b):
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {ad.shape} and {bd.shape}")
    if ad.shape[1] != bd.shape[0]:
        raise ValueError(f"matmul shape mismatch: {ad.shape} @ {bd.shape} (inner {ad.shape[1]} != {bd.shape[0]})")
    return _result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def spd_solve(K, M):
    """``K^{-1} M`` for a dense symmetric positive definite ``K`` (Cholesky).

    Only the lower triangle of ``K`` is read, so the gradient returned for
    ``K`` is the symmetrised one: correct whenever ``K`` is built
    symmetrically upstream.
    """
    K, M = _as_tensor(K), _as_tensor(M, K)
    try:
        fac = cho_factor(K.data, lower=True)
    except LinAlgError as exc:
        raise ValueError("matrix is not positive definite") from exc
    X = cho_solve(fac, M.data)

    def backward(g):
        gm = cho_solve(fac, g)
        gk = -(gm @ X.T) if X.ndim == 2 else -np.outer(gm, X)
        return 0.5 * (gk + gk.T), gm

    return _result(X, (K, M), backward)


def spd_logdet(K):
    """``log det K`` for a dense SPD ``K`` (symmetrised gradient, as in :func:`spd_solve`)."""
    K = _as_tensor(K)
    try:
        fac = cho_factor(K.data, lower=True)
    except LinAlgError as exc:
        raise ValueError("matrix is not positive definite") from exc
    value = 2.0 * np.sum(np.log(np.diag(fac[0])))

    def backward(g):
        return (g * cho_solve(fac, np.eye(K.shape[0])),)

    return _result(np.asarray(value), (K,), backward)


def dense(x, w, b=None):
    """Affine layer ``x @ w + b`` with ``w`` of shape (in, out)."""
    out = matmul(x, w)
    return out if b is None else add(out, b)


def conv2d(x, w, b=None, stride=2, pad=1):
    """Direct 2-D cross-correlation; ``w`` has shape (Cout, Cin, kh, kw)."""
    xd, wd = np.ascontiguousarray(x.data), np.ascontiguousarray(w.data)
    if xd.ndim != 4 or wd.ndim != 4 or xd.shape[1] != wd.shape[1]:
        raise ValueError(f"conv2d shape mismatch: input {xd.shape}, weight {wd.shape}")
    bsz, _, h, wid = xd.shape
    co, _, kh, kw = wd.shape
    ho, wo = _accel.conv_out_size(h, kh, stride, pad), _accel.conv_out_size(wid, kw, stride, pad)
    dtype = np.result_type(xd, wd)
    out = np.empty((bsz, co, ho, wo), dtype=dtype)
    _accel.conv2d(xd.astype(dtype, copy=False), wd.astype(dtype, copy=False), stride, pad, out)
    if b is not None:
        out += b.data.reshape(1, co, 1, 1)

    def backward(g):
        g = np.ascontiguousarray(g, dtype=dtype)
        dx = np.empty(xd.shape, dtype=dtype)
        _accel.conv2d_grad_input(g, wd.astype(dtype, copy=False), stride, pad, dx)
        dw = np.empty(wd.shape, dtype=dtype)
        _accel.conv2d_grad_weight(xd.astype(dtype, copy=False), g, stride, pad, dw)
        db = None if b is None else g.sum(axis=(0, 2, 3), dtype=np.float64)
        return (dx, dw, db) if b is not None else (dx, dw)

    parents = (x, w, b) if b is not None else (x, w)
    return _result(out, parents, backward)


def conv_transpose2d(x, w, b=None, stride=2, pad=1, output_padding=1):
    """Transposed convolution; ``w`` has shape (Cin, Cout, kh, kw).

    Output extent is ``(n - 1) * stride - 2 * pad + k + output_padding``.
    """
    xd, wd = np.ascontiguousarray(x.data), np.ascontiguousarray(w.data)
    if xd.ndim != 4 or wd.ndim != 4 or xd.shape[1] != wd.shape[0]:
        raise ValueError(f"conv_transpose2d shape mismatch: input {xd.shape}, weight {wd.shape}")
    bsz, _, h, wid = xd.shape
    _, co, kh, kw = wd.shape
    ho = (h - 1) * stride - 2 * pad + kh + output_padding
    wo = (wid - 1) * stride - 2 * pad + kw + output_padding
    dtype = np.result_type(xd, wd)
    xd, wd = xd.astype(dtype, copy=False), wd.astype(dtype, copy=False)
    out = np.empty((bsz, co, ho, wo), dtype=dtype)
    # forward of the transpose is the input-gradient of the matching conv
    _accel.conv2d_grad_input(xd, wd, stride, pad, out)
    if b is not None:
        out += b.data.reshape(1, co, 1, 1)

    def backward(g):
        g = np.ascontiguousarray(g, dtype=dtype)
        dx = np.empty(xd.shape, dtype=dtype)
        _accel.conv2d(g, wd, stride, pad, dx)
        dw = np.empty(wd.shape, dtype=dtype)
        _accel.conv2d_grad_weight(g, xd, stride, pad, dw)
        db = None if b is None else g.sum(axis=(0, 2, 3), dtype=np.float64)
        return (dx, dw, db) if b is not None else (dx, dw)

    parents = (x, w, b) if b is not None else (x, w)
    return _result(out, parents, backward)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def grad_check(f, params, h=1e-4):
    """Max relative error between analytic and central-difference gradients.

    ``f`` is a zero-argument callable building a scalar graph from
    ``params`` (a list of leaf tensors).  The relative error of one
    entry is ``|analytic - numeric| / (|numeric| + 1e-8)``.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    for p in params:
        if not np.all(np.isfinite(p.data)):
            raise ValueError("grad_check requires finite parameters")
        p.zero_grad()
    out = f()
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError("loss is not finite")
    if out.requires_grad:
        out.backward()
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                fp = float(f().data)
                flat[i] = orig - h
                fm = float(f().data)
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            err = abs(analytic.reshape(-1)[i] - num) / (abs(num) + 1e-8)
            worst = max(worst, err)
    return worst
