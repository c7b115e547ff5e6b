"""Dense-tensor reverse-mode automatic differentiation.

Small closed set of primitives: enough for a transformer encoder, the
softmax-parameter generator, cross-entropy training and differentiable
SGD updates. Everything is numpy-backed, float64 by default (float32 is
selectable per tensor), single-threaded per graph.
"""

import numpy as np

DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""


class GradError(RuntimeError):
    """Raised when a gradient is required but missing."""


class Tensor:
    """A node in the computation graph.

    `data` is a numpy array; `grad` (same shape) is populated by
    `backward` and accumulates additively until cleared.
    """

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward", "name")

    def __init__(self, data, requires_grad=False, dtype=None, _prev=(), _backward=None, name=None):
        self.data = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._prev = tuple(_prev)
        self._backward = _backward if _backward is not None else _noop
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}, name={self.name})"


def _noop():
    return None


def as_tensor(x, dtype=None):
    """Wrap a constant (no gradient) value."""
    if isinstance(x, Tensor):
        return x
    return Tensor(x, requires_grad=False, dtype=dtype)


def _requires(*ts):
    return any(t.requires_grad for t in ts)


def _reduce_to(g, shape):
    """Sum `g` down to `shape` (undo numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _topo(root):
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._prev:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss):
    """Reverse-mode sweep from a scalar loss.

    Gradients accumulate into `.grad` of every requires_grad ancestor;
    repeated calls from the same loss add up until `zero_grad_graph`.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    order = _topo(loss)
    loss.accumulate(np.ones_like(loss.data))
    for node in reversed(order):
        node._backward()


def zero_grad_graph(root):
    """Clear `.grad` on every node reachable from `root`."""
    for node in _topo(root):
        node.grad = None


# ---------------------------------------------------------------------------
# primitives


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        out_data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.data.shape} and {b.data.shape} do not broadcast")
    out = Tensor(out_data, requires_grad=_requires(a, b), _prev=(a, b))

    def _bw():
        g = out.grad
        if a.requires_grad:
            a.accumulate(_reduce_to(g, a.data.shape))
        if b.requires_grad:
            b.accumulate(_reduce_to(g, b.data.shape))

    out._backward = _bw
    return out


def sub(a, b):
    return add(a, neg(b))


def neg(a):
    a = as_tensor(a)
    out = Tensor(-a.data, requires_grad=a.requires_grad, _prev=(a,))

    def _bw():
        if a.requires_grad:
            a.accumulate(-out.grad)

    out._backward = _bw
    return out


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        out_data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.data.shape} and {b.data.shape} do not broadcast")
    out = Tensor(out_data, requires_grad=_requires(a, b), _prev=(a, b))

    def _bw():
        g = out.grad
        if a.requires_grad:
            a.accumulate(_reduce_to(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate(_reduce_to(g * a.data, b.data.shape))

    out._backward = _bw
    return out


def scale(a, c):
    """Multiply by a python float constant."""
    a = as_tensor(a)
    c = float(c)
    out = Tensor(a.data * c, requires_grad=a.requires_grad, _prev=(a,))

    def _bw():
        if a.requires_grad:
            a.accumulate(out.grad * c)

    out._backward = _bw
    return out


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: inner dims of {a.data.shape} and {b.data.shape} differ")
    out = Tensor(np.matmul(a.data, b.data), requires_grad=_requires(a, b), _prev=(a, b))

    def _bw():
        g = out.grad
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a.accumulate(_reduce_to(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b.accumulate(_reduce_to(gb, b.data.shape))

    out._backward = _bw
    return out


def tanh(a):
    a = as_tensor(a)
    out = Tensor(np.tanh(a.data), requires_grad=a.requires_grad, _prev=(a,))

    def _bw():
        if a.requires_grad:
            a.accumulate(out.grad * (1.0 - out.data ** 2))

    out._backward = _bw
    return out


def reshape(a, shape):
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape), requires_grad=a.requires_grad, _prev=(a,))

    def _bw():
        if a.requires_grad:
            a.accumulate(out.grad.reshape(a.data.shape))

    out._backward = _bw
    return out


def transpose(a, axes):
    a = as_tensor(a)
    axes = tuple(axes)
    out = Tensor(np.transpose(a.data, axes), requires_grad=a.requires_grad, _prev=(a,))
    inv = tuple(np.argsort(axes))

    def _bw():
        if a.requires_grad:
            a.accumulate(np.transpose(out.grad, inv))

    out._backward = _bw
    return out


def sum_all(a):
    a = as_tensor(a)
    out = Tensor(a.data.sum(), requires_grad=a.requires_grad, _prev=(a,))

    def _bw():
        if a.requires_grad:
            a.accumulate(np.full(a.data.shape, float(out.grad)))

    out._backward = _bw
    return out


def mean_rows(a):
    """Mean over axis 0: set pooling of a stack of vectors.

    Each column is summed in value-sorted order, so the result depends
    only on the multiset of rows — pooling is exactly invariant to row
    permutations, not merely up to float rounding. The gradient (1/n to
    every entry) is unaffected."""
    a = as_tensor(a)
    if a.data.ndim < 1 or a.data.shape[0] == 0:
        raise ShapeError(f"mean_rows needs a nonempty leading axis, got shape {a.data.shape}")
    n = a.data.shape[0]
    out = Tensor(np.sort(a.data, axis=0).mean(axis=0), requires_grad=a.requires_grad, _prev=(a,))

    def _bw():
        if a.requires_grad:
            a.accumulate(np.broadcast_to(out.grad / n, a.data.shape))

    out._backward = _bw
    return out


def concat_rows(parts):
    """Row-wise concatenation: 1-d inputs are stacked as rows, n-d inputs
    are concatenated along axis 0."""
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat_rows needs at least one input")
    one_d = parts[0].data.ndim == 1
    dims = {p.data.shape[1:] if not one_d else p.data.shape for p in parts}
    if len(dims) != 1:
        raise ShapeError(f"concat_rows: inconsistent shapes {[p.data.shape for p in parts]}")
    if one_d:
        out_data = np.stack([p.data for p in parts], axis=0)
        sizes = [1] * len(parts)
    else:
        out_data = np.concatenate([p.data for p in parts], axis=0)
        sizes = [p.data.shape[0] for p in parts]
    out = Tensor(out_data, requires_grad=_requires(*parts), _prev=tuple(parts))

    def _bw():
        ofs = 0
        for p, n in zip(parts, sizes):
            g = out.grad[ofs:ofs + n]
            if p.requires_grad:
                p.accumulate(g[0] if one_d else g)
            ofs += n

    out._backward = _bw
    return out


def slice_cols(a, start, stop):
    """Slice along the last axis."""
    a = as_tensor(a)
    out = Tensor(a.data[..., start:stop], requires_grad=a.requires_grad, _prev=(a,))

    def _bw():
        if a.requires_grad:
            g = np.zeros_like(a.data)
            g[..., start:stop] = out.grad
            a.accumulate(g)

    out._backward = _bw
    return out


def take_row0(a, axis=1):
    """Pick index 0 along `axis` (the CLS position of a (B, T, d) batch)."""
    a = as_tensor(a)
    out = Tensor(np.take(a.data, 0, axis=axis), requires_grad=a.requires_grad, _prev=(a,))

    def _bw():
        if a.requires_grad:
            g = np.zeros_like(a.data)
            idx = [slice(None)] * a.data.ndim
            idx[axis] = 0
            g[tuple(idx)] = out.grad
            a.accumulate(g)

    out._backward = _bw
    return out


def embedding(table, ids):
    """Row gather: ids (any shape of ints) -> ids.shape + (d,)."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ShapeError(
            f"embedding: id out of range [0, {table.data.shape[0]}), got min={ids.min()} max={ids.max()}")
    out = Tensor(table.data[ids], requires_grad=table.requires_grad, _prev=(table,))

    def _bw():
        if table.requires_grad:
            g = np.zeros_like(table.data)
            np.add.at(g, ids, out.grad)
            table.accumulate(g)

    out._backward = _bw
    return out


def softmax(a, mask=None):
    """Softmax over the last axis; `mask` is an optional additive constant
    (e.g. -inf-like penalties on padded attention keys)."""
    a = as_tensor(a)
    x = a.data if mask is None else a.data + mask
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    s = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(s, requires_grad=a.requires_grad, _prev=(a,))

    def _bw():
        if a.requires_grad:
            g = out.grad
            dot = (g * s).sum(axis=-1, keepdims=True)
            a.accumulate(s * (g - dot))

    out._backward = _bw
    return out


def layer_norm(a, gamma, beta, eps=1e-9):
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    a, gamma, beta = as_tensor(a), as_tensor(gamma), as_tensor(beta)
    d = a.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise ShapeError(
            f"layer_norm: scale/shift shapes {gamma.data.shape}/{beta.data.shape} do not match feature dim ({d},)")
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * inv
    out = Tensor(gamma.data * xhat + beta.data, requires_grad=_requires(a, gamma, beta),
                 _prev=(a, gamma, beta))

    def _bw():
        g = out.grad
        if gamma.requires_grad:
            gamma.accumulate(_reduce_to(g * xhat, gamma.data.shape))
        if beta.requires_grad:
            beta.accumulate(_reduce_to(g, beta.data.shape))
        if a.requires_grad:
            gx = g * gamma.data
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            a.accumulate(inv * (gx - m1 - xhat * m2))

    out._backward = _bw
    return out


def dropout(a, p, rng):
    """Inverted dropout with a fixed Bernoulli mask drawn from `rng`."""
    a = as_tensor(a)
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return a
    mask = (rng.random(a.data.shape) >= p) / (1.0 - p)
    out = Tensor(a.data * mask, requires_grad=a.requires_grad, _prev=(a,))

    def _bw():
        if a.requires_grad:
            a.accumulate(out.grad * mask)

    out._backward = _bw
    return out


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of integer labels against row-wise softmax."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects (n, N) logits, got {logits.data.shape}")
    n, N = logits.data.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match logits rows ({n},)")
    if labels.size and (labels.min() < 0 or labels.max() >= N):
        raise ValueError(f"label out of range [0, {N}): min={labels.min()} max={labels.max()}")
    x = logits.data - logits.data.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(x).sum(axis=-1, keepdims=True))
    logp = x - logz
    loss = -logp[np.arange(n), labels].mean()
    out = Tensor(loss, requires_grad=logits.requires_grad, _prev=(logits,))

    def _bw():
        if logits.requires_grad:
            p = np.exp(logp)
            p[np.arange(n), labels] -= 1.0
            logits.accumulate(float(out.grad) * p / n)

    out._backward = _bw
    return out


def detach(a):
    """Share values, block gradient flow to ancestors."""
    a = as_tensor(a)
    return Tensor(a.data, requires_grad=False)


def leaf_like(a):
    """A fresh requires_grad leaf sharing `a`'s values (graph cut)."""
    return Tensor(np.array(as_tensor(a).data, copy=True), requires_grad=True)


def sgd_step(param, lr):
    """Functional SGD update: param - lr * stopgrad(param.grad).

    Returns a new tensor keeping graph linkage to `param` and, when `lr`
    is a Tensor, to the learning rate — the update itself stays
    differentiable w.r.t. both.
    """
    param = as_tensor(param)
    if param.grad is None:
        raise GradError("sgd_step: parameter has no gradient; run backward first")
    g = as_tensor(np.array(param.grad, copy=True))
    if isinstance(lr, Tensor):
        return sub(param, mul(lr, g))
    lr = float(lr)
    if lr < 0:
        raise ValueError(f"sgd_step: learning rate must be nonnegative, got {lr}")
    return sub(param, scale(g, lr))
