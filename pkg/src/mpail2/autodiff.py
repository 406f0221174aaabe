"""Reverse-mode automatic differentiation over numpy arrays.

A small define-by-run tape: every operation returns a :class:`Tensor` that
records its parents and a vector-Jacobian product. VJPs are themselves built
from the same traced primitives, so gradients of gradients (needed by the
reward gradient penalty) work without any special casing.

All generic ops in this module accept either ``Tensor`` or ``numpy.ndarray``
operands and dispatch accordingly, which lets model code share one forward
implementation between the traced (training) path and the plain-numpy
(planning / target) path. Reductions accumulate in float64 and cast back to
the operand dtype.
"""

from __future__ import annotations

import numpy as np


class AutodiffError(RuntimeError):
    pass


class TapeConsumedError(AutodiffError):
    """Raised when backward() is called twice on the same tape root."""


class Tensor:
    """A node in the computation graph wrapping a numpy array."""

    __slots__ = ("data", "parents", "vjp", "requires_grad", "name", "_consumed")

    # Keep numpy from hijacking reflected operators (ndarray + Tensor).
    __array_ufunc__ = None

    def __init__(self, data, parents=(), vjp=None, requires_grad=False, name=None):
        self.data = np.asarray(data)
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad or any(
            isinstance(p, Tensor) and p.requires_grad for p in parents
        )
        self.name = name
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

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

    def __getitem__(self, idx):
        return getitem(self, idx)


def val(x):
    """Underlying ndarray of a Tensor, or the input itself."""
    return x.data if isinstance(x, Tensor) else x


def constant(x):
    """Wrap an array as a graph constant (no gradient flows into it)."""
    return Tensor(np.asarray(x))


def leaf(x, name=None):
    """Wrap an array as a differentiable leaf."""
    return Tensor(np.asarray(x), requires_grad=True, name=name)


def stop_gradient(x):
    """Detach a value from the tape."""
    return Tensor(val(x)) if isinstance(x, Tensor) else x


def _needs(x):
    return isinstance(x, Tensor) and x.requires_grad


def _is_tensor_op(*args):
    return any(isinstance(a, Tensor) for a in args)


def _node(data, parents, vjp):
    if not any(_needs(p) for p in parents):
        return Tensor(data)
    return Tensor(data, parents=parents, vjp=vjp, requires_grad=True)


# --- reduction kernels ---------------------------------------------------------
# mean accumulates in float64 (it is the loss-reduction op: batch means stay
# stable in 32-bit training); sum stays in the operand dtype.

def _sum_np(x, axis=None, keepdims=False):
    return np.sum(x, axis=axis, keepdims=keepdims)


def _mean_np(x, axis=None, keepdims=False):
    out = np.mean(x, axis=axis, keepdims=keepdims, dtype=np.float64)
    return np.asarray(out, dtype=x.dtype)


def _sigmoid_np(x):
    # tanh form: one stable ufunc pass for any magnitude
    return 0.5 * np.tanh(0.5 * x) + 0.5


def _softplus_np(x):
    return np.logaddexp(np.asarray(0.0, dtype=np.asarray(x).dtype), x)


# --- broadcasting helper ------------------------------------------------------

def unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    shape = tuple(shape)
    if val(g).shape == shape:
        return g
    extra = val(g).ndim - len(shape)
    if extra > 0:
        g = sum_(g, axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and val(g).shape[i] != 1)
    if axes:
        g = sum_(g, axis=axes, keepdims=True)
    if val(g).shape != shape:
        g = reshape(g, shape)
    return g


# --- elementwise binary ops ---------------------------------------------------

def add(a, b):
    if not _is_tensor_op(a, b):
        return a + b
    out = val(a) + val(b)
    na, nb = _needs(a), _needs(b)
    sa, sb = np.shape(val(a)), np.shape(val(b))

    def vjp(g):
        return (
            unbroadcast(g, sa) if na else None,
            unbroadcast(g, sb) if nb else None,
        )

    return _node(out, (a, b), vjp)


def sub(a, b):
    if not _is_tensor_op(a, b):
        return a - b
    out = val(a) - val(b)
    na, nb = _needs(a), _needs(b)
    sa, sb = np.shape(val(a)), np.shape(val(b))

    def vjp(g):
        return (
            unbroadcast(g, sa) if na else None,
            unbroadcast(neg(g), sb) if nb else None,
        )

    return _node(out, (a, b), vjp)


def mul(a, b):
    if not _is_tensor_op(a, b):
        return a * b
    out = val(a) * val(b)
    na, nb = _needs(a), _needs(b)
    sa, sb = np.shape(val(a)), np.shape(val(b))

    def vjp(g):
        return (
            unbroadcast(mul(g, b), sa) if na else None,
            unbroadcast(mul(g, a), sb) if nb else None,
        )

    return _node(out, (a, b), vjp)


def div(a, b):
    if not _is_tensor_op(a, b):
        return a / b
    out = val(a) / val(b)
    na, nb = _needs(a), _needs(b)
    sa, sb = np.shape(val(a)), np.shape(val(b))

    def vjp(g):
        da = unbroadcast(div(g, b), sa) if na else None
        db = unbroadcast(neg(div(mul(g, a), mul(b, b))), sb) if nb else None
        return (da, db)

    return _node(out, (a, b), vjp)


def neg(a):
    if not isinstance(a, Tensor):
        return -a
    return _node(-a.data, (a,), lambda g: (neg(g),))


def matmul(a, b):
    if not _is_tensor_op(a, b):
        return np.matmul(a, b)
    av, bv = val(a), val(b)
    if av.ndim < 2 or bv.ndim < 2:
        raise AutodiffError("matmul operands must be at least 2-D")
    out = np.matmul(av, bv)
    na, nb = _needs(a), _needs(b)
    sa, sb = av.shape, bv.shape

    def vjp(g):
        da = unbroadcast(matmul(g, swapaxes(b, -1, -2)), sa) if na else None
        db = unbroadcast(matmul(swapaxes(a, -1, -2), g), sb) if nb else None
        return (da, db)

    return _node(out, (a, b), vjp)


# --- elementwise unary ops ----------------------------------------------------

def exp(a):
    if not isinstance(a, Tensor):
        return np.exp(a)
    out = _node(np.exp(a.data), (a,), None)
    if out.requires_grad:
        out.vjp = lambda g: (mul(g, out),)
    return out


def log(a):
    if not isinstance(a, Tensor):
        return np.log(a)
    return _node(np.log(a.data), (a,), lambda g: (div(g, a),))


def sqrt(a):
    if not isinstance(a, Tensor):
        return np.sqrt(a)
    out = _node(np.sqrt(a.data), (a,), None)
    if out.requires_grad:
        out.vjp = lambda g: (div(mul(g, 0.5), out),)
    return out


def tanh(a):
    if not isinstance(a, Tensor):
        return np.tanh(a)
    out = _node(np.tanh(a.data), (a,), None)
    if out.requires_grad:
        out.vjp = lambda g: (mul(g, sub(1.0, mul(out, out))),)
    return out


def sigmoid(a):
    if not isinstance(a, Tensor):
        return _sigmoid_np(a)
    out = _node(_sigmoid_np(a.data), (a,), None)
    if out.requires_grad:
        out.vjp = lambda g: (mul(g, mul(out, sub(1.0, out))),)
    return out


def softplus(a):
    if not isinstance(a, Tensor):
        return _softplus_np(a)
    return _node(_softplus_np(a.data), (a,), lambda g: (mul(g, sigmoid(a)),))


def square(a):
    return mul(a, a)


def clip(a, lo, hi):
    """Clamp with zero gradient outside (lo, hi); bounds are constants."""
    if not isinstance(a, Tensor):
        return np.clip(a, lo, hi)
    mask = ((a.data > lo) & (a.data < hi)).astype(a.data.dtype)
    return _node(np.clip(a.data, lo, hi), (a,), lambda g: (mul(g, mask),))


# --- reductions ----------------------------------------------------------------

def sum_(a, axis=None, keepdims=False):
    if not isinstance(a, Tensor):
        return _sum_np(a, axis, keepdims)
    out = _sum_np(a.data, axis, keepdims)
    shape = a.data.shape

    def vjp(g):
        return (_spread(g, shape, axis, keepdims),)

    return _node(out, (a,), vjp)


def mean(a, axis=None, keepdims=False):
    if not isinstance(a, Tensor):
        return _mean_np(a, axis, keepdims)
    out = _mean_np(a.data, axis, keepdims)
    shape = a.data.shape
    axes = _norm_axes(axis, len(shape))
    n = int(np.prod([shape[i] for i in axes])) if shape else 1

    def vjp(g):
        return (mul(_spread(g, shape, axis, keepdims), 1.0 / n),)

    return _node(out, (a,), vjp)


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _spread(g, shape, axis, keepdims):
    """Broadcast a reduced gradient back to ``shape``."""
    if not shape:
        return g
    axes = _norm_axes(axis, len(shape))
    if not keepdims:
        kshape = tuple(1 if i in axes else s for i, s in enumerate(shape))
        g = reshape(g, kshape)
    return broadcast_to(g, shape)


# --- shape ops -------------------------------------------------------------------

def reshape(a, shape):
    if not isinstance(a, Tensor):
        return np.reshape(a, shape)
    orig = a.data.shape
    return _node(np.reshape(a.data, shape), (a,), lambda g: (reshape(g, orig),))


def swapaxes(a, ax1, ax2):
    if not isinstance(a, Tensor):
        return np.swapaxes(a, ax1, ax2)
    return _node(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (swapaxes(g, ax1, ax2),))


def broadcast_to(a, shape):
    # read-only views are fine: downstream ops never write in place
    if not isinstance(a, Tensor):
        return np.broadcast_to(a, shape)
    orig = a.data.shape
    return _node(np.broadcast_to(a.data, shape), (a,), lambda g: (unbroadcast(g, orig),))


def concat(parts, axis=-1):
    if not _is_tensor_op(*parts):
        return np.concatenate(parts, axis=axis)
    datas = [val(p) for p in parts]
    out = np.concatenate(datas, axis=axis)
    ax = axis % out.ndim
    sizes = [d.shape[ax] for d in datas]
    offsets = np.cumsum([0] + sizes)
    needs = [_needs(p) for p in parts]

    def vjp(g):
        grads = []
        for i, need in enumerate(needs):
            if not need:
                grads.append(None)
                continue
            idx = (slice(None),) * ax + (slice(int(offsets[i]), int(offsets[i + 1])),)
            grads.append(getitem(g, idx))
        return tuple(grads)

    return _node(out, tuple(parts), vjp)


def getitem(a, idx):
    if not isinstance(a, Tensor):
        return a[idx]
    shape = a.data.shape

    def vjp(g):
        return (_scatter(g, idx, shape),)

    return _node(a.data[idx], (a,), vjp)


def _scatter(g, idx, shape):
    """Place ``g`` into zeros of ``shape`` at ``idx`` (basic indexing only)."""
    if not isinstance(g, Tensor):
        out = np.zeros(shape, dtype=np.asarray(g).dtype)
        out[idx] = g
        return out
    out = np.zeros(shape, dtype=g.data.dtype)
    out[idx] = g.data
    return _node(out, (g,), lambda gg: (getitem(gg, idx),))


def _layer_norm_np(xv, gv, bv, eps):
    """Shared LayerNorm kernel; returns (out, xhat, inv)."""
    n = xv.shape[-1]
    mu = np.add.reduce(xv, axis=-1, keepdims=True) * np.asarray(1.0 / n, dtype=xv.dtype)
    xc = xv - mu
    var = np.add.reduce(xc * xc, axis=-1, keepdims=True) * np.asarray(1.0 / n, dtype=xv.dtype)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=xv.dtype))
    xhat = xc * inv
    return xhat * gv + bv, xhat, inv


def layer_norm(x, gamma, beta, eps):
    """Fused LayerNorm over the last axis: gamma * (x - mu) / sigma + beta.

    Single fused node for speed; the VJP closes over the normalized primal as
    a constant, so this op supports first-order gradients only. That is
    deliberate: the one grad-of-grad path in this codebase (the reward
    gradient penalty) runs through a LayerNorm-free head by construction.
    """
    xv, gv, bv = val(x), val(gamma), val(beta)
    out, xhat, inv = _layer_norm_np(xv, gv, bv, eps)
    if not _is_tensor_op(x, gamma, beta):
        return out
    nx, ng, nb = _needs(x), _needs(gamma), _needs(beta)
    gshape, bshape = np.shape(gv), np.shape(bv)

    def vjp(g):
        ghat = mul(g, gv)
        dx = None
        if nx:
            m1 = mean(ghat, axis=-1, keepdims=True)
            m2 = mean(mul(ghat, xhat), axis=-1, keepdims=True)
            dx = mul(sub(sub(ghat, m1), mul(xhat, m2)), inv)
        dg = unbroadcast(mul(g, xhat), gshape) if ng else None
        db = unbroadcast(g, bshape) if nb else None
        return (dx, dg, db)

    return _node(out, (x, gamma, beta), vjp)


# --- backward engine -------------------------------------------------------------

def _toposort(root):
    """Post-order over the requires_grad subgraph reachable from root."""
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
        for p in node.parents:
            if isinstance(p, Tensor) and p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root, seed_grad=None, wrt=None, create_graph=False):
    """Run reverse-mode accumulation from ``root``.

    Args:
        root: tape root (output of a recorded forward pass).
        seed_grad: cotangent for the root; defaults to ones.
        wrt: optional list of tensors to report gradients for. Tensors not
            reached by the tape get zeros. When omitted, gradients for every
            reachable leaf are returned.
        create_graph: keep results as Tensors so they can be differentiated
            again (gradient-of-gradient).

    Returns:
        dict mapping tensors to gradients (ndarrays, or Tensors when
        ``create_graph`` is set).
    """
    if not isinstance(root, Tensor):
        raise AutodiffError("backward() needs a Tensor tape root")
    if root._consumed:
        raise TapeConsumedError("this tape was already consumed by backward()")
    root._consumed = True

    if seed_grad is None:
        seed = constant(np.ones_like(root.data))
    elif isinstance(seed_grad, Tensor):
        seed = seed_grad
    else:
        seed = constant(np.asarray(seed_grad, dtype=root.data.dtype))
    if val(seed).shape != root.data.shape:
        raise AutodiffError(
            f"seed gradient shape {val(seed).shape} != root shape {root.data.shape}"
        )

    wanted = None if wrt is None else {id(t) for t in wrt}
    results = {}
    if root.requires_grad:
        cotangents = {root: seed}
        for node in reversed(_toposort(root)):
            g = cotangents.pop(node, None)
            if g is None:
                continue
            if wanted is not None and id(node) in wanted:
                results[node] = g
            if node.vjp is None:
                if wanted is None:
                    results[node] = g
                continue
            parent_grads = node.vjp(g)
            for p, pg in zip(node.parents, parent_grads):
                if pg is None or not _needs(p):
                    continue
                if p in cotangents:
                    cotangents[p] = add(cotangents[p], pg)
                else:
                    cotangents[p] = pg

    def finish(g):
        return g if create_graph else val(g)

    if wrt is None:
        return {t: finish(g) for t, g in results.items()}
    out = {}
    for t in wrt:
        if t in results:
            out[t] = finish(results[t])
        else:
            z = np.zeros_like(t.data)
            out[t] = constant(z) if create_graph else z
    return out
