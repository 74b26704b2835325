"""Dense float64 tensors with reverse-mode differentiation.

Values are C-contiguous NumPy arrays (row-major flat storage plus shape);
each op builds a node holding its parents and a backward closure, so the
tape is per-forward-pass and never shared. Broadcasting is deliberately
restricted to trailing-axis affine forms (`add_vec`, `mul_vec`) and batch
tiling (`tile_batch`) to keep every backward rule auditable.

NaN/Inf guards at op boundaries are active only while `debug_checks` is on.
"""

from __future__ import annotations

import contextlib

import numpy as np

from . import _kernels


class NonFiniteError(FloatingPointError):
    """An op produced or consumed NaN/Inf while debug checks were enabled."""


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested op."""


_grad_enabled = True
_debug_checks = False


@contextlib.contextmanager
def no_grad():
    """Disable taping inside the block (forward values only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def set_debug_checks(enabled):
    global _debug_checks
    _debug_checks = bool(enabled)


def debug_checks_enabled():
    return _debug_checks


def _check_finite(arr, where):
    if _debug_checks and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {where}")


def _contig(a):
    """C-contiguous float64 view/copy; unlike ascontiguousarray, keeps 0-d 0-d."""
    a = np.asarray(a, dtype=np.float64)
    return a if a.flags["C_CONTIGUOUS"] else np.ascontiguousarray(a)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_grad_owned")

    def __init__(self, data, requires_grad=False):
        self.data = _contig(data)
        _check_finite(self.data, "tensor constructor")
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self._grad_owned = False

    # -- introspection ------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- autodiff -----------------------------------------------------------

    def zero_grad(self):
        self.grad = None
        self._grad_owned = False

    def backward(self, grad=None):
        """Reverse pass from this node; `grad` defaults to 1 for scalars."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without grad requires a scalar tensor")
            grad = np.ones_like(self.data)
        self.grad = np.asarray(grad, dtype=np.float64).reshape(self.data.shape)
        self._grad_owned = True

        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            # interior grads are not needed once consumed
            if node is not self and node._parents:
                node.grad = None
                node._grad_owned = False

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        # keep a reference, do not mutate: the buffer may be shared with a
        # sibling contribution
        t.grad = g
        t._grad_owned = False
    elif t._grad_owned:
        t.grad += g
    else:
        t.grad = t.grad + g
        t._grad_owned = True


def _node(data, parents, backward, where):
    _check_finite(data, where)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._grad_owned = False
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# -- elementwise ------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add: {a.shape} vs {b.shape}")

    def backward(g):
        _accum(a, g)
        _accum(b, g)

    return _node(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"sub: {a.shape} vs {b.shape}")

    def backward(g):
        _accum(a, g)
        _accum(b, -g)

    return _node(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul: {a.shape} vs {b.shape}")

    def backward(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _node(a.data * b.data, (a, b), backward, "mul")


def scale(x, a, b=0.0):
    """Scalar affine a*x + b."""
    x = as_tensor(x)

    def backward(g):
        _accum(x, a * g)

    return _node(a * x.data + b, (x,), backward, "scale")


def add_vec(x, v):
    """x + v with v matching the trailing axes of x."""
    x, v = as_tensor(x), as_tensor(v)
    if x.shape[x.ndim - v.ndim:] != v.shape:
        raise DimensionError(f"add_vec: {x.shape} vs trailing {v.shape}")
    lead = tuple(range(x.ndim - v.ndim))

    def backward(g):
        _accum(x, g)
        _accum(v, g.sum(axis=lead) if lead else g)

    return _node(x.data + v.data, (x, v), backward, "add_vec")


def mul_vec(x, v):
    """x * v with v matching the trailing axes of x."""
    x, v = as_tensor(x), as_tensor(v)
    if x.shape[x.ndim - v.ndim:] != v.shape:
        raise DimensionError(f"mul_vec: {x.shape} vs trailing {v.shape}")
    lead = tuple(range(x.ndim - v.ndim))

    def backward(g):
        _accum(x, g * v.data)
        gv = g * x.data
        _accum(v, gv.sum(axis=lead) if lead else gv)

    return _node(x.data * v.data, (x, v), backward, "mul_vec")


def sigmoid(x):
    x = as_tensor(x)
    y = 1.0 / (1.0 + np.exp(-x.data))

    def backward(g):
        _accum(x, g * y * (1.0 - y))

    return _node(y, (x,), backward, "sigmoid")


def gelu(x):
    """Exact Gaussian-error GELU, x * Phi(x)."""
    x = as_tensor(x)

    def backward(g):
        _accum(x, _kernels.active.gelu_bwd(x.data, g))

    return _node(_kernels.active.gelu_fwd(x.data), (x,), backward, "gelu")


# -- shape ops ----------------------------------------------------------------


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape

    def backward(g):
        _accum(x, g.reshape(old))

    return _node(_contig(x.data.reshape(shape)), (x,), backward, "reshape")


def transpose(x, axes):
    x = as_tensor(x)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _accum(x, _contig(g.transpose(inverse)))

    return _node(_contig(x.data.transpose(axes)), (x,), backward, "transpose")


def concat(parts, axis):
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, start, stop in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, stop)
            _accum(p, _contig(g[tuple(sl)]))

    return _node(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), backward, "concat")


def narrow(x, axis, start, length):
    """Contiguous slice [start, start+length) along axis."""
    x = as_tensor(x)
    if start < 0 or start + length > x.shape[axis]:
        raise DimensionError(f"narrow: [{start},{start + length}) outside axis of {x.shape[axis]}")
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def backward(g):
        full = np.zeros_like(x.data)
        full[sl] = g
        _accum(x, full)

    return _node(_contig(x.data[sl]), (x,), backward, "narrow")


def tile_batch(x, n):
    """Prepend a batch axis of size n (broadcast copy); backward sums it away."""
    x = as_tensor(x)

    def backward(g):
        _accum(x, g.sum(axis=0))

    data = _contig(np.broadcast_to(x.data, (n,) + x.shape))
    return _node(data, (x,), backward, "tile_batch")


# -- reductions ---------------------------------------------------------------


def sum_all(x):
    x = as_tensor(x)

    def backward(g):
        _accum(x, np.broadcast_to(g, x.shape).copy())

    return _node(np.asarray(x.data.sum()), (x,), backward, "sum_all")


def mean_all(x):
    x = as_tensor(x)
    n = x.size

    def backward(g):
        _accum(x, np.broadcast_to(g / n, x.shape).copy())

    return _node(np.asarray(x.data.mean()), (x,), backward, "mean_all")


def mean_axis(x, axis):
    x = as_tensor(x)
    n = x.shape[axis]

    def backward(g):
        _accum(x, _contig(np.repeat(np.expand_dims(g / n, axis), n, axis=axis)))

    return _node(_contig(x.data.mean(axis=axis)), (x,), backward, "mean_axis")


# -- linear algebra -----------------------------------------------------------


def matmul(a, b):
    """Batched matrix product; leading dims must match exactly."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: leading dims differ, {a.shape} vs {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dims differ, {a.shape} vs {b.shape}")

    def backward(g):
        _accum(a, np.matmul(g, b.data.swapaxes(-1, -2)))
        _accum(b, np.matmul(a.data.swapaxes(-1, -2), g))

    return _node(np.matmul(a.data, b.data), (a, b), backward, "matmul")


def linear(x, w, b=None):
    """x @ w + b over the last axis; x (..., k), w (k, m), b (m,)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: {x.shape} @ {w.shape}")
    y = np.matmul(x.data, w.data)
    if b is not None:
        b = as_tensor(b)
        y = y + b.data
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gf = g.reshape(-1, g.shape[-1])
        xf = x.data.reshape(-1, x.shape[-1])
        _accum(x, np.matmul(g, w.data.T))
        _accum(w, np.matmul(xf.T, gf))
        if b is not None:
            _accum(b, gf.sum(axis=0))

    return _node(y, parents, backward, "linear")


# -- normalizers & loss --------------------------------------------------------


def softmax(x, axis=-1):
    """Max-subtracted softmax along `axis`; outputs sum to 1 there."""
    x = as_tensor(x)
    axis = axis % x.ndim
    moved = axis != x.ndim - 1
    xd = np.moveaxis(x.data, axis, -1) if moved else x.data
    rows = _contig(xd.reshape(-1, xd.shape[-1]))
    y2 = _kernels.active.softmax2d_fwd(rows)
    y = y2.reshape(xd.shape)
    if moved:
        y = _contig(np.moveaxis(y, -1, axis))

    def backward(g):
        gd = np.moveaxis(g, axis, -1) if moved else g
        g2 = _contig(gd.reshape(-1, gd.shape[-1]))
        gx = _kernels.active.softmax2d_bwd(y2, g2).reshape(gd.shape)
        if moved:
            gx = _contig(np.moveaxis(gx, -1, axis))
        _accum(x, gx)

    return _node(y, (x,), backward, "softmax")


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean/unit variance, then affine."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain/bias must be ({d},)")
    rows = x.data.reshape(-1, d)
    y2, mean, rstd = _kernels.active.layernorm2d_fwd(rows, gain.data, bias.data, eps)

    def backward(g):
        g2 = _contig(g.reshape(-1, d))
        gx, dgain, dbias = _kernels.active.layernorm2d_bwd(rows, gain.data, mean, rstd, g2)
        _accum(x, gx.reshape(x.shape))
        _accum(gain, dgain)
        _accum(bias, dbias)

    return _node(y2.reshape(x.shape), (x, gain, bias), backward, "layer_norm")


def cross_entropy(logits, labels):
    """Mean negative log-softmax at the true class; labels are int indices."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape}, labels {labels.shape}")
    loss, probs = _kernels.active.cross_entropy2d_fwd(logits.data, labels)

    def backward(g):
        _accum(logits, _kernels.active.cross_entropy2d_bwd(probs, labels, float(g)))

    return _node(np.asarray(loss), (logits,), backward, "cross_entropy")


# -- parameters ---------------------------------------------------------------


class Parameter:
    """Named leaf tensor with a trainable flag.

    A frozen parameter is never written by an optimizer step; its flag also
    gates whether ops tape gradients through it.
    """

    __slots__ = ("id", "value", "_trainable")

    def __init__(self, id, value, trainable=True):
        self.id = id
        self.value = value if isinstance(value, Tensor) else Tensor(value)
        self.value.requires_grad = trainable
        self._trainable = trainable

    @property
    def trainable(self):
        return self._trainable

    @trainable.setter
    def trainable(self, flag):
        self._trainable = bool(flag)
        self.value.requires_grad = self._trainable

    @property
    def size(self):
        return self.value.size

    def __repr__(self):
        return f"Parameter({self.id!r}, shape={self.value.shape}, trainable={self._trainable})"
