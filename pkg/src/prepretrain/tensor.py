"""Minimal reverse-mode autodiff over numpy arrays.

Tensors record the primitive that produced them; ``backward`` topologically
sorts the recorded graph (the tape) and runs each node's vector-Jacobian
product exactly once in reverse execution order.

Precision is float32 by default.  ``oracle_mode()`` switches newly created
tensors to float64, which is what the finite-difference checks run under.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

_DTYPE = [np.float32]


def default_dtype():
    return _DTYPE[-1]


@contextlib.contextmanager
def oracle_mode():
    _DTYPE.append(np.float64)
    try:
        yield
    finally:
        _DTYPE.pop()


class GradError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_op", "_consumed")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype or default_dtype())
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjp = None
        self._op = "leaf"
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def backward(self):
        backward(self)

    # operator sugar; each maps to a primitive below
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

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
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _node(data, parents, vjp, op) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._consumed = False
    out._op = op
    need = any(p.requires_grad for p in parents)
    out.requires_grad = need
    if need:
        out._parents = tuple(parents)
        out._vjp = vjp
    else:
        out._parents = ()
        out._vjp = None
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


@dataclass
class Tape:
    """Execution-ordered record of the primitives reachable from a loss."""

    nodes: list = field(default_factory=list)

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        order, seen = [], set()
        stack = [(loss, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def leaves(self):
        return [n for n in self.nodes if n.is_leaf]


def backward(loss: Tensor) -> Tape:
    if loss.data.size != 1:
        raise GradError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GradError("loss is detached from every requires_grad tensor")
    if loss._consumed:
        raise GradError("backward already ran on this graph; rebuild the loss")
    tape = Tape.from_loss(loss)
    for leaf in tape.leaves():
        if leaf.grad is not None:
            raise GradError("stale gradient on a leaf; call zero_grad before a new backward")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g if node.grad is None else node.grad + g
            continue
        pgrads = node._vjp(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        node._consumed = True
    loss._consumed = True
    return tape


def zero_grad(params):
    for p in params.values() if isinstance(params, dict) else params:
        p.grad = None


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def vjp(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _node(ad * bd, (a, b), vjp, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), vjp, "div")


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,), "exp")


def log(x):
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise FloatingPointError("log of non-positive value")
    xd = x.data
    return _node(np.log(xd), (x,), lambda g: (g / xd,), "log")


def tanh(x):
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _node(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


_SQRT_HALF = float(np.sqrt(0.5))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


def gelu(x):
    """Exact GELU, x * Phi(x)."""
    x = as_tensor(x)
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _SQRT_HALF))
    cdf = cdf.astype(xd.dtype, copy=False)

    def vjp(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return _node(xd * cdf, (x,), vjp, "gelu")


def clamp_max(x, limit):
    x = as_tensor(x)
    keep = x.data <= limit
    return _node(np.minimum(x.data, limit), (x,), lambda g: (g * keep,), "clamp_max")


# ---------------------------------------------------------------- reductions / shape

def sum_(x, axis=None, keepdims=False):
    x = as_tensor(x)
    shape = x.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), vjp, "sum")


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axis, keepdims), 1.0 / count)


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x, axes):
    x = as_tensor(x)
    inv = np.argsort(axes)
    return _node(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                 lambda g: (np.ascontiguousarray(g.transpose(inv)),), "transpose")


def slice_axis(x, axis, start, stop):
    x = as_tensor(x)
    shape = x.shape
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return _node(np.ascontiguousarray(x.data[idx]), (x,), vjp, "slice")


def concat(xs, axis):
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        out = []
        for i in range(len(xs)):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(bounds[i], bounds[i + 1])
            out.append(np.ascontiguousarray(g[tuple(idx)]))
        return tuple(out)

    return _node(np.concatenate([x.data for x in xs], axis=axis), tuple(xs), vjp, "concat")


def gather_rows(x, index):
    """out[b, i] = x[b, index[b, i]] for x of shape [B, N, ...]."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    b = np.arange(x.shape[0])[:, None]
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, (b, index), g)
        return (full,)

    return _node(x.data[b, index], (x,), vjp, "gather_rows")


def broadcast_rows(x, batch):
    """Tile a [T, E] tensor to [batch, T, E]."""
    x = as_tensor(x)
    return _node(np.broadcast_to(x.data, (batch,) + x.shape).copy(), (x,),
                 lambda g: (g.sum(axis=0),), "broadcast_rows")


def embedding(weight, ids):
    """Row lookup weight[ids]; ids is an integer array of any shape."""
    weight = as_tensor(weight)
    ids = np.asarray(ids, dtype=np.int64)
    shape = weight.shape

    def vjp(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, ids, g)
        return (full,)

    return _node(weight.data[ids], (weight,), vjp, "embedding")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _node(np.matmul(ad, bd), (a, b), vjp, "matmul")


def linear(x, w, b=None):
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ---------------------------------------------------------------- normalization / softmax

def layer_norm(x, gamma, beta, eps=1e-6):
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.shape[-1] == 0:
        raise ValueError("layer_norm over a zero-length axis")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gamma.data

    def vjp(g):
        gg = gb = gx = None
        if gamma.requires_grad:
            gg = _unbroadcast(g * xhat, gd.shape)
        if beta.requires_grad:
            gb = _unbroadcast(g, beta.shape)
        if x.requires_grad:
            gh = g * gd
            n = xd.shape[-1]
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * (gh * xhat).sum(axis=-1, keepdims=True) / n)
        return gx, gg, gb

    return _node(xhat * gd + beta.data, (x, gamma, beta), vjp, "layer_norm")


def softmax(x):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _node(p, (x,), vjp, "softmax")


def log_softmax(x):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def vjp(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _node(out, (x,), vjp, "log_softmax")


def l2_normalize(x, eps=1e-12):
    x = as_tensor(x)
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=-1, keepdims=True))
    norm = np.maximum(norm, eps)
    y = xd / norm

    def vjp(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)

    return _node(y, (x,), vjp, "l2_normalize")


def _check_distribution(t):
    if np.any(t < 0) or np.any(np.abs(t.sum(axis=-1) - 1.0) > 1e-6):
        raise ValueError("every target row must be a probability distribution")


def softmax_cross_entropy_soft(logits, targets):
    """Batch mean of -sum_c t_c log softmax(logits)_c."""
    logits = as_tensor(logits)
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets,
                   dtype=logits.data.dtype)
    if t.shape != logits.shape or logits.ndim != 2:
        raise ValueError("logits and targets must both be [B, C]")
    _check_distribution(t)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    batch = logits.shape[0]
    loss = -(t * logp).sum() / batch

    def vjp(g):
        return (g * (np.exp(logp) - t) / batch,)

    return _node(np.asarray(loss, dtype=logits.data.dtype), (logits,), vjp, "softmax_xent")


def entropy(t):
    t = np.asarray(t, dtype=np.float64)
    nz = t > 0
    return -np.sum(np.where(nz, t * np.log(np.where(nz, t, 1.0)), 0.0), axis=-1)


# ---------------------------------------------------------------- finite-difference check

@dataclass
class GradcheckReport:
    max_rel_error: float
    tol: float
    per_input: list

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def gradcheck(fn, inputs, h=1e-5, tol=1e-4) -> GradcheckReport:
    """Compare analytic gradients of ``sum(fn(*inputs) * probe)`` with central differences.

    Relative error per input is max|analytic - numeric| / max(max|numeric|, 1e-8).
    Must run under ``oracle_mode``; inputs are float64 arrays.
    """
    if default_dtype() is not np.float64:
        raise GradError("gradcheck requires oracle_mode (float64)")
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*leaves)
    probe = np.random.default_rng(1234).standard_normal(out.shape)

    def scalar(xs):
        y = fn(*[Tensor(x) for x in xs]).data
        return float((y * probe).sum())

    loss = sum_(mul(out, probe))
    backward(loss)
    errors = []
    for i, arr in enumerate(arrays):
        num = np.zeros_like(arr)
        flat = num.reshape(-1)
        for j in range(arr.size):
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[i].reshape(-1)[j] += h
            minus[i].reshape(-1)[j] -= h
            flat[j] = (scalar(plus) - scalar(minus)) / (2 * h)
        ana = leaves[i].grad if leaves[i].grad is not None else np.zeros_like(arr)
        scale = max(np.abs(num).max(initial=0.0), 1e-8)
        errors.append(float(np.abs(ana - num).max(initial=0.0) / scale))
    return GradcheckReport(max(errors), tol, errors)
