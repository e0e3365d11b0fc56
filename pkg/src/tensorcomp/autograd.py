"""A small reverse-mode tape over numpy arrays.

Only the operations the toy encoder and its losses need are provided.
Every function here also accepts plain arrays and then simply returns
the numpy result, so loss code can be shared between both worlds.
"""
import numpy as np
from scipy.special import erf


class Tensor:
    __array_ufunc__ = None  # keep numpy from swallowing mixed expressions

    def __init__(self, value, parents=(), backward=None, requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self._backward = backward
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, name={self.name!r})"

    def backward(self):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf."""
        if self.value.size != 1:
            raise ValueError("backward() needs a scalar output")
        if not np.isfinite(self.value).all():
            raise FloatingPointError("loss is not finite")
        order, seen = [], set()

        def visit(node):
            # iterative DFS; graphs are a few thousand nodes deep
            stack = [(node, False)]
            while stack:
                cur, done = stack.pop()
                if done:
                    order.append(cur)
                    continue
                if id(cur) in seen:
                    continue
                seen.add(id(cur))
                stack.append((cur, True))
                for p in cur.parents:
                    if p.requires_grad and id(p) not in seen:
                        stack.append((p, False))

        visit(self)
        grads = {id(self): np.ones_like(self.value)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node.parents, node._backward(g)):
                if parent.requires_grad and pg is not None:
                    key = id(parent)
                    grads[key] = pg if key not in grads else grads[key] + pg

    # operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, e):
        return power(self, e)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)


def parameter(value, name=None) -> Tensor:
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _is_plain(*xs):
    return not any(isinstance(x, Tensor) for x in xs)


def add(a, b):
    if _is_plain(a, b):
        return np.add(a, b)
    a, b = _wrap(a), _wrap(b)
    return Tensor(
        a.value + b.value, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def neg(a):
    if _is_plain(a):
        return np.negative(a)
    return Tensor(-a.value, (a,), lambda g: (-g,))


def mul(a, b):
    if _is_plain(a, b):
        return np.multiply(a, b)
    a, b = _wrap(a), _wrap(b)
    return Tensor(
        a.value * b.value, (a, b),
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
    )


def power(a, e: float):
    if _is_plain(a):
        return np.power(a, e)
    return Tensor(a.value**e, (a,), lambda g: (g * e * a.value ** (e - 1),))


def matmul(a, b):
    if _is_plain(a, b):
        return np.matmul(a, b)
    a, b = _wrap(a), _wrap(b)

    def back(g):
        ga = g @ np.swapaxes(b.value, -1, -2)
        gb = np.swapaxes(a.value, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor(a.value @ b.value, (a, b), back)


def tsum(a, axis=None, keepdims=False):
    if _is_plain(a):
        return np.sum(a, axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor(a.value.sum(axis=axis, keepdims=keepdims), (a,), back)


def mean(a, axis=None, keepdims=False):
    if _is_plain(a):
        return np.mean(a, axis=axis, keepdims=keepdims)
    n = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape):
    if _is_plain(a):
        return np.reshape(a, shape)
    return Tensor(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    if _is_plain(a):
        return np.transpose(a, axes)
    inv = None if axes is None else np.argsort(axes)
    return Tensor(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, idx):
    if _is_plain(a):
        return a[idx]

    def back(g):
        full = np.zeros_like(a.value)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor(a.value[idx], (a,), back)


def exp(a):
    if _is_plain(a):
        return np.exp(a)
    out = np.exp(a.value)
    return Tensor(out, (a,), lambda g: (g * out,))


def log(a):
    if _is_plain(a):
        return np.log(a)
    return Tensor(np.log(a.value), (a,), lambda g: (g / a.value,))


def gelu(a):
    """Exact (erf) GELU."""
    if _is_plain(a):
        return 0.5 * a * (1.0 + erf(a / np.sqrt(2.0)))
    x = a.value
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return Tensor(x * cdf, (a,), lambda g: (g * (cdf + x * pdf),))


def softmax(a, axis=-1):
    if _is_plain(a):
        z = np.exp(a - np.max(a, axis=axis, keepdims=True))
        return z / z.sum(axis=axis, keepdims=True)
    z = np.exp(a.value - a.value.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor(out, (a,), back)


def log_softmax(a, axis=-1):
    if _is_plain(a):
        z = a - np.max(a, axis=axis, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    z = a.value - a.value.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    sm = np.exp(out)

    def back(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return Tensor(out, (a,), back)


def layer_norm(a, gamma, beta, eps=1e-5):
    """Normalise over the last axis, then scale and shift."""
    if _is_plain(a, gamma, beta):
        mu = a.mean(axis=-1, keepdims=True)
        var = ((a - mu) ** 2).mean(axis=-1, keepdims=True)
        return (a - mu) / np.sqrt(var + eps) * gamma + beta
    a = _wrap(a)
    x = a.value
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    norm = Tensor(xhat, (a,), None)

    def back(g):
        n = x.shape[-1]
        gm = g.mean(axis=-1, keepdims=True)
        gx = g * xhat
        return (inv * (g - gm - xhat * gx.sum(axis=-1, keepdims=True) / n),)

    norm._backward = back
    return norm * gamma + beta
