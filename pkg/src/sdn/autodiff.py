"""Tape-based reverse-mode differentiation over numpy arrays.

Every primitive below accepts plain arrays or :class:`Var` objects. With
plain arrays it just computes the numpy result; as soon as one argument is a
``Var`` the call is recorded on that variable's tape, so model code runs
unchanged in both evaluation and training.

    tape = Tape()
    w = tape.param(np.ones(3))
    loss = ad.sum(w * w)
    (gw,) = tape.backward(loss)
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import InvalidInputError, SdnError, finite_diff_grad


class UnsupportedPrimitiveError(SdnError):
    pass


class Tape:
    """Append-only record of a computation; backward runs once."""

    def __init__(self):
        self.ops = []      # op tag per node
        self.parents = []  # tuple of parent node ids per node
        self.vjps = []     # local backward rule per node
        self.values = []   # cached forward value per node
        self.params = []   # node ids of leaves
        self._consumed = False

    def __len__(self):
        return len(self.ops)

    def _push(self, op, parents, value, vjp) -> "Var":
        value = np.asarray(value, dtype=np.float64)
        self.ops.append(op)
        self.parents.append(tuple(parents))
        self.vjps.append(vjp)
        self.values.append(value)
        return Var(self, len(self.ops) - 1, value)

    def param(self, value) -> "Var":
        v = self._push("param", (), np.array(value, dtype=np.float64), None)
        self.params.append(v.index)
        return v

    def backward(self, root: "Var") -> list:
        """Gradients of the scalar ``root`` for every param, in creation order."""
        if not isinstance(root, Var) or root.tape is not self:
            raise InvalidInputError("root is not a node of this tape")
        if root.value.size != 1:
            raise InvalidInputError(f"backward needs a scalar root, got shape {root.shape}")
        if self._consumed:
            raise SdnError("tape already consumed by a backward pass")
        self._consumed = True
        grads = {root.index: np.ones_like(root.value)}
        for i in range(root.index, -1, -1):
            g = grads.pop(i, None)
            if g is None or self.vjps[i] is None:
                if g is not None:
                    grads[i] = g  # leaf: keep
                continue
            for p, gp in zip(self.parents[i], self.vjps[i](g)):
                if gp is None:
                    continue
                if p in grads:
                    grads[p] = grads[p] + gp
                else:
                    grads[p] = gp
        return [grads.get(p, np.zeros_like(self.values[p])) for p in self.params]


class Var:
    """A recorded array value."""

    __slots__ = ("tape", "index", "value")
    __array_ufunc__ = None  # make numpy defer to our reflected operators

    def __init__(self, tape, index, value):
        self.tape = tape
        self.index = index
        self.value = value

    shape = property(lambda self: self.value.shape)
    ndim = property(lambda self: self.value.ndim)
    size = property(lambda self: self.value.size)

    @property
    def T(self):
        return transpose(self)

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"Var(shape={self.shape}, op={self.tape.ops[self.index]!r})"

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def value(x):
    """Underlying numpy value of an array or Var."""
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def is_var(x) -> bool:
    return isinstance(x, Var)


def _tape_of(*args):
    tape = None
    for a in args:
        if isinstance(a, Var):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise InvalidInputError("operands recorded on different tapes")
    return tape


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _record(op, args, out, vjp):
    """Push ``out`` with a vjp returning one gradient per Var in ``args``."""
    tape = _tape_of(*args)
    var_pos = [k for k, a in enumerate(args) if isinstance(a, Var)]
    parents = [args[k].index for k in var_pos]

    def local(g):
        gs = vjp(g)
        return [gs[k] for k in var_pos]

    return tape._push(op, parents, out, local)


def _any_var(*args):
    return any(isinstance(a, Var) for a in args)


# --- primitives -------------------------------------------------------------

def add(a, b):
    av, bv = value(a), value(b)
    out = av + bv
    if not _any_var(a, b):
        return out
    return _record("add", (a, b), out,
                   lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def sub(a, b):
    av, bv = value(a), value(b)
    out = av - bv
    if not _any_var(a, b):
        return out
    return _record("sub", (a, b), out,
                   lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)))


def mul(a, b):
    av, bv = value(a), value(b)
    out = av * bv
    if not _any_var(a, b):
        return out
    return _record("mul", (a, b), out,
                   lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b):
    av, bv = value(a), value(b)
    out = av / bv
    if not _any_var(a, b):
        return out
    return _record("div", (a, b), out,
                   lambda g: (_unbroadcast(g / bv, av.shape),
                              _unbroadcast(-g * av / (bv * bv), bv.shape)))


def neg(a):
    out = -value(a)
    if not _any_var(a):
        return out
    return _record("neg", (a,), out, lambda g: (-g,))


def power(a, p):
    """Elementwise power with a constant exponent."""
    if isinstance(p, Var):
        raise UnsupportedPrimitiveError("pow with a recorded exponent")
    av = value(a)
    out = av ** p
    if not _any_var(a):
        return out
    return _record("pow", (a,), out, lambda g: (g * p * av ** (p - 1),))


def matmul(a, b):
    av, bv = value(a), value(b)
    out = av @ bv
    if not _any_var(a, b):
        return out
    a2 = av if av.ndim > 1 else av[None, :]
    b2 = bv if bv.ndim > 1 else bv[:, None]

    def vjp(g):
        g2 = g.reshape(np.broadcast_shapes(a2.shape[:-2], b2.shape[:-2]) + (a2.shape[-2], b2.shape[-1]))
        ga = _unbroadcast(g2 @ np.swapaxes(b2, -1, -2), a2.shape).reshape(av.shape)
        gb = _unbroadcast(np.swapaxes(a2, -1, -2) @ g2, b2.shape).reshape(bv.shape)
        return ga, gb

    return _record("matmul", (a, b), out, vjp)


def relu(a):
    av = value(a)
    out = np.maximum(av, 0.0)
    if not _any_var(a):
        return out
    # subgradient 0 at the kink
    return _record("relu", (a,), out, lambda g: (g * (av > 0.0),))


def exp(a):
    out = np.exp(value(a))
    if not _any_var(a):
        return out
    return _record("exp", (a,), out, lambda g: (g * out,))


def log(a):
    av = value(a)
    out = np.log(av)
    if not _any_var(a):
        return out
    return _record("log", (a,), out, lambda g: (g / av,))


def sqrt(a):
    out = np.sqrt(value(a))
    if not _any_var(a):
        return out

    def vjp(g):
        safe = np.where(out > 0.0, out, 1.0)
        return (np.where(out > 0.0, g / (2.0 * safe), 0.0),)

    return _record("sqrt", (a,), out, vjp)


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    av = value(a)
    out = np.sum(av, axis=axis, keepdims=keepdims)
    if not _any_var(a):
        return out

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape).copy(),)

    return _record("sum", (a,), out, vjp)


def mean(a, axis=None, keepdims=False):
    av = value(a)
    count = av.size if axis is None else np.prod([av.shape[k] for k in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def norm2(a, axis=-1, keepdims=False):
    """Squared Euclidean norm along ``axis``."""
    av = value(a)
    out = np.sum(av * av, axis=axis, keepdims=keepdims)
    if not _any_var(a):
        return out

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (2.0 * g * av,)

    return _record("norm2", (a,), out, vjp)


def logsumexp(a, axis=-1, keepdims=False):
    av = value(a)
    m = np.max(av, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.log(np.sum(np.exp(av - m), axis=axis, keepdims=True)) + m
    out = s if keepdims else np.squeeze(s, axis=axis)
    if not _any_var(a):
        return out

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * np.exp(av - s),)

    return _record("logsumexp", (a,), out, vjp)


def softmax(a, axis=-1):
    av = value(a)
    z = np.exp(av - np.max(av, axis=axis, keepdims=True))
    out = z / np.sum(z, axis=axis, keepdims=True)
    if not _any_var(a):
        return out

    def vjp(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _record("softmax", (a,), out, vjp)


def weighted_sum(a, weights, axis=0):
    """Sum along ``axis`` with constant weights: ``sum_j w_j a[..., j, ...]``."""
    if isinstance(weights, Var):
        raise UnsupportedPrimitiveError("weighted_sum with recorded weights")
    av = value(a)
    w = np.asarray(weights, dtype=np.float64)
    moved = np.moveaxis(av, axis, -1)
    out = moved @ w
    if not _any_var(a):
        return out

    def vjp(g):
        return (np.moveaxis(g[..., None] * w, -1, axis),)

    return _record("weighted_sum", (a,), out, vjp)


def concat(parts, axis=-1):
    vals = [value(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    if not _any_var(*parts):
        return out
    ax = axis % out.ndim
    cuts = np.cumsum([v.shape[ax] for v in vals])[:-1]

    def vjp(g):
        return np.split(g, cuts, axis=ax)

    return _record("concat", tuple(parts), out, vjp)


def reshape(a, shape):
    av = value(a)
    out = av.reshape(shape)
    if not _any_var(a):
        return out
    return _record("reshape", (a,), out, lambda g: (g.reshape(av.shape),))


def transpose(a, axes=None):
    av = value(a)
    out = np.transpose(av, axes)
    if not _any_var(a):
        return out
    inv = None if axes is None else np.argsort(axes)
    return _record("transpose", (a,), out, lambda g: (np.transpose(g, inv),))


def broadcast_to(a, shape):
    av = value(a)
    out = np.broadcast_to(av, shape).copy()
    if not _any_var(a):
        return out
    return _record("broadcast_to", (a,), out, lambda g: (_unbroadcast(g, av.shape),))


def getitem(a, idx):
    av = value(a)
    out = av[idx]
    if not _any_var(a):
        return np.array(out, dtype=np.float64)

    def vjp(g):
        full = np.zeros_like(av)
        np.add.at(full, idx, g)
        return (full,)

    return _record("getitem", (a,), out, vjp)


def stop_gradient(a):
    return value(a).copy()


PRIMITIVES = {
    "add": add, "sub": sub, "mul": mul, "div": div, "neg": neg, "pow": power,
    "matmul": matmul, "relu": relu, "exp": exp, "log": log, "sqrt": sqrt,
    "sum": sum, "mean": mean, "norm2": norm2, "logsumexp": logsumexp,
    "softmax": softmax, "weighted_sum": weighted_sum, "concat": concat,
    "reshape": reshape, "transpose": transpose, "broadcast_to": broadcast_to,
    "getitem": getitem,
}


def apply(name, *args, **kwargs):
    """Call a primitive by tag; unknown tags raise UnsupportedPrimitiveError."""
    try:
        fn = PRIMITIVES[name]
    except KeyError:
        raise UnsupportedPrimitiveError(f"unsupported primitive {name!r}") from None
    return fn(*args, **kwargs)


# --- drivers ----------------------------------------------------------------

def record_forward(fun, params):
    """Run ``fun`` on fresh params of a new tape.

    Returns ``(root, tape, param_vars)``; ``root`` must be scalar.
    """
    tape = Tape()
    pvars = [tape.param(p) for p in params]
    root = fun(pvars)
    if not isinstance(root, Var):
        # computation independent of the params
        root = tape._push("const", (), np.asarray(root, dtype=np.float64), None)
    if root.size != 1:
        raise InvalidInputError(f"computation returned shape {root.shape}, expected a scalar")
    return root, tape, pvars


def backward(tape: Tape, root: Var) -> list:
    return tape.backward(root)


def value_and_grad(fun, params):
    root, tape, _ = record_forward(fun, params)
    return float(root.value), tape.backward(root)


def flatten(arrays):
    return np.concatenate([np.ravel(a) for a in arrays]) if arrays else np.zeros(0)


def unflatten(flat, like):
    out, k = [], 0
    for a in like:
        n = np.size(a)
        out.append(np.asarray(flat[k:k + n], dtype=np.float64).reshape(np.shape(a)))
        k += n
    return out


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    tol: float
    passed: bool
    worst_index: int = -1


def grad_check(fun, params, h=1e-6, tol=1e-6, n_coords=None, rng=None, floor=1e-6):
    """Compare backward against central differences.

    ``fun`` maps a list of arrays (or Vars) to a scalar. The relative error
    of a coordinate is ``|ad - fd| / max(|ad|, |fd|, floor)``. ReLU kinks
    are not handled here: callers nudge inputs away from exact zeros.
    """
    params = [np.asarray(p, dtype=np.float64) for p in params]
    _, grads = value_and_grad(fun, params)
    g_ad = flatten(grads)
    x0 = flatten(params)
    if n_coords is None or n_coords >= x0.size:
        idx = np.arange(x0.size)
    else:
        gen = rng.generator if rng is not None else np.random.default_rng(0)
        idx = np.sort(gen.choice(x0.size, size=n_coords, replace=False))

    def flat_fun(x):
        return float(value(fun(unflatten(x, params))))

    g_fd = finite_diff_grad(flat_fun, x0, h=h, indices=idx)
    a, b = g_ad[idx], g_fd[idx]
    rel = np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    worst = int(np.argmax(rel)) if rel.size else -1
    err = float(rel[worst]) if rel.size else 0.0
    return GradCheckReport(err, int(idx.size), tol, err < tol, int(idx[worst]) if rel.size else -1)
