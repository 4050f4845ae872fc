"""Small dense-array automatic differentiation.

Two mechanisms live here:

* :class:`Tape` / :class:`Tensor` -- reverse mode.  Every operation on a
  ``Tensor`` appends a node to its tape; the tape is topologically ordered by
  construction, so :meth:`Tape.backward` is a single reverse sweep.
* :class:`Dual` -- forward mode.  A dual value pairs a primal with a tangent
  (a directional derivative).  Both halves may be tape tensors, which is what
  lets a loss that reads the tangent be differentiated with respect to the
  parameters in the same reverse sweep.

Every function in this module accepts plain numpy arrays, ``Tensor`` or
``Dual`` operands.  With no ``Tensor`` involved nothing is recorded, so the
same model code doubles as a fast evaluation path.
"""
from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError

__all__ = [
    "Tape",
    "Tensor",
    "Dual",
    "value_of",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "power",
    "matmul",
    "linear",
    "relu",
    "tanh",
    "sqrt",
    "sum",
    "mean",
    "norm",
    "cosine",
    "take",
    "stack",
    "jvp",
    "backward",
]


class Tape:
    """Append-only record of operations.

    Leaves registered through :meth:`param` are the parameters whose
    gradients :meth:`backward` reports.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.params: dict = {}

    def param(self, name, value) -> Tensor:
        if name in self.params:
            raise ContractError(f"parameter {name!r} registered twice")
        t = self._record(np.asarray(value, dtype=np.float64), (), None)
        self.params[name] = t
        return t

    def constant(self, value) -> Tensor:
        return self._record(np.asarray(value, dtype=np.float64), (), None)

    def _record(self, value, parents, vjp) -> Tensor:
        t = Tensor(value, self, len(self.nodes), parents, vjp)
        self.nodes.append(t)
        return t

    def backward(self, root: Tensor) -> dict:
        """Reverse sweep from a scalar ``root``.

        Returns ``{name: gradient}`` for every registered parameter; a
        parameter the root does not depend on gets zeros.
        """
        if not isinstance(root, Tensor) or root.tape is not self:
            raise ContractError("root must be a tensor recorded on this tape")
        if root.value.size != 1:
            raise ContractError(f"root must be scalar, got shape {root.value.shape}")
        nodes = self.nodes
        adj = [None] * (root.index + 1)
        adj[root.index] = np.ones_like(root.value)
        for i in range(root.index, -1, -1):
            g = adj[i]
            if g is None:
                continue
            node = nodes[i]
            if node.vjp is None:
                continue
            for parent, gp in zip(node.parents, node.vjp(g)):
                if gp is None:
                    continue
                j = parent.index
                adj[j] = gp if adj[j] is None else adj[j] + gp
        grads = {}
        for name, leaf in self.params.items():
            g = adj[leaf.index] if leaf.index <= root.index else None
            grads[name] = np.zeros_like(leaf.value) if g is None else g
        return grads


class Tensor:
    """A value recorded on a :class:`Tape`."""

    __slots__ = ("value", "tape", "index", "parents", "vjp")
    __array_priority__ = 100.0

    def __init__(self, value, tape, index, parents, vjp):
        self.value = value
        self.tape = tape
        self.index = index
        self.parents = parents
        self.vjp = vjp

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, index={self.index})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __neg__ = lambda self: neg(self)
    __pow__ = lambda self, k: power(self, k)
    __matmul__ = lambda self, o: matmul(self, o)
    __rmatmul__ = lambda self, o: matmul(o, self)
    __getitem__ = lambda self, idx: take(self, idx)


class Dual:
    """Primal value with a tangent along one seed direction."""

    __slots__ = ("primal", "tangent")
    __array_priority__ = 200.0

    def __init__(self, primal, tangent=None):
        if not isinstance(primal, (Tensor, Dual)):
            primal = np.asarray(primal, dtype=np.float64)
        if tangent is None:
            tangent = np.zeros(np.shape(value_of(primal)))
        elif not isinstance(tangent, (Tensor, Dual)):
            tangent = np.asarray(tangent, dtype=np.float64)
        if _shape(primal) != _shape(tangent):
            raise DimensionError(
                f"primal shape {_shape(primal)} != tangent shape {_shape(tangent)}"
            )
        self.primal = primal
        self.tangent = tangent

    @property
    def shape(self):
        return _shape(self.primal)

    @property
    def ndim(self):
        return len(self.shape)

    def __repr__(self):
        return f"Dual(primal={self.primal!r}, tangent={self.tangent!r})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __neg__ = lambda self: neg(self)
    __pow__ = lambda self, k: power(self, k)
    __matmul__ = lambda self, o: matmul(self, o)
    __rmatmul__ = lambda self, o: matmul(o, self)
    __getitem__ = lambda self, idx: take(self, idx)


def _mkdual(primal, tangent):
    d = Dual.__new__(Dual)
    d.primal = primal
    d.tangent = tangent
    return d


def value_of(x):
    """Strip tape and tangent information, returning the numpy primal."""
    while True:
        if isinstance(x, Dual):
            x = x.primal
        elif isinstance(x, Tensor):
            return x.value
        else:
            return np.asarray(x, dtype=np.float64)


def _shape(x):
    if isinstance(x, Dual):
        return _shape(x.primal)
    if isinstance(x, Tensor):
        return x.value.shape
    return np.shape(x)


def _tape_of(*xs):
    tape = None
    for x in xs:
        if isinstance(x, Tensor):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ContractError("operands recorded on different tapes")
    return tape


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _raw(x):
    return x.value if isinstance(x, Tensor) else x


def _record(tape, value, parents, vjp):
    # Constant operands are closed over by ``vjp``; only tensors are parents.
    mask = tuple(isinstance(p, Tensor) for p in parents)
    if all(mask):
        return tape._record(value, parents, vjp)
    tparents = tuple(p for p in parents if isinstance(p, Tensor))

    def pruned(g):
        grads = vjp(g)
        return tuple(gp for gp, keep in zip(grads, mask) if keep)

    return tape._record(value, tparents, pruned)


# -- elementwise arithmetic ------------------------------------------------

def add(a, b):
    if isinstance(a, Dual) or isinstance(b, Dual):
        a, b = _dual(a), _dual(b)
        return _mkdual(add(a.primal, b.primal), add(a.tangent, b.tangent))
    tape = _tape_of(a, b)
    av, bv = _raw(a), _raw(b)
    out = np.add(av, bv)
    if tape is None:
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return _record(tape, out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    if isinstance(a, Dual) or isinstance(b, Dual):
        a, b = _dual(a), _dual(b)
        return _mkdual(sub(a.primal, b.primal), sub(a.tangent, b.tangent))
    tape = _tape_of(a, b)
    av, bv = _raw(a), _raw(b)
    out = np.subtract(av, bv)
    if tape is None:
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return _record(tape, out, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def neg(a):
    if isinstance(a, Dual):
        return _mkdual(neg(a.primal), neg(a.tangent))
    if not isinstance(a, Tensor):
        return np.negative(a)
    return a.tape._record(-a.value, (a,), lambda g: (-g,))


def mul(a, b):
    if isinstance(a, Dual) or isinstance(b, Dual):
        if not isinstance(b, Dual):
            return _mkdual(mul(a.primal, b), mul(a.tangent, b))
        if not isinstance(a, Dual):
            return _mkdual(mul(a, b.primal), mul(a, b.tangent))
        return _mkdual(
            mul(a.primal, b.primal),
            add(mul(a.tangent, b.primal), mul(a.primal, b.tangent)),
        )
    tape = _tape_of(a, b)
    av, bv = _raw(a), _raw(b)
    out = np.multiply(av, bv)
    if tape is None:
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return _record(
        tape, out, (a, b),
        lambda g: (_unbroadcast(g * bv, sa), _unbroadcast(g * av, sb)),
    )


def div(a, b):
    if isinstance(a, Dual) or isinstance(b, Dual):
        if not isinstance(b, Dual):
            return _mkdual(div(a.primal, b), div(a.tangent, b))
        a = _dual(a)
        q = div(a.primal, b.primal)
        # (a/b)' = (a' - q b') / b
        return _mkdual(q, div(sub(a.tangent, mul(q, b.tangent)), b.primal))
    tape = _tape_of(a, b)
    av, bv = _raw(a), _raw(b)
    out = np.divide(av, bv)
    if tape is None:
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return _record(
        tape, out, (a, b),
        lambda g: (_unbroadcast(g / bv, sa), _unbroadcast(-g * out / bv, sb)),
    )


def power(a, k):
    """``a ** k`` for a constant exponent ``k``."""
    if isinstance(a, Dual):
        return _mkdual(power(a.primal, k), mul(mul(power(a.primal, k - 1), float(k)), a.tangent))
    if not isinstance(a, Tensor):
        return np.power(a, k)
    av = a.value
    if k == 2:
        return a.tape._record(av * av, (a,), lambda g: (2.0 * g * av,))
    return a.tape._record(np.power(av, k), (a,), lambda g: (k * g * np.power(av, k - 1),))


def _dual(x):
    return x if isinstance(x, Dual) else _mkdual(x, np.zeros(_shape(x)))


# -- linear algebra -------------------------------------------------------

def matmul(a, b):
    """Matrix product of rank-1/rank-2 operands (numpy ``@`` semantics)."""
    if isinstance(a, Dual) or isinstance(b, Dual):
        if not isinstance(b, Dual):
            return _mkdual(matmul(a.primal, b), matmul(a.tangent, b))
        if not isinstance(a, Dual):
            return _mkdual(matmul(a, b.primal), matmul(a, b.tangent))
        return _mkdual(
            matmul(a.primal, b.primal),
            add(matmul(a.tangent, b.primal), matmul(a.primal, b.tangent)),
        )
    av, bv = _raw(a), _raw(b)
    if np.shape(av)[-1] != np.shape(bv)[0]:
        raise DimensionError(f"matmul shapes {np.shape(av)} and {np.shape(bv)}")
    out = av @ bv
    tape = _tape_of(a, b)
    if tape is None:
        return out

    def vjp(g):
        if av.ndim == 1 and bv.ndim == 1:
            return g * bv, g * av
        if av.ndim == 1:
            return bv @ g, np.outer(av, g)
        if bv.ndim == 1:
            return np.outer(g, bv), av.T @ g
        return g @ bv.T, av.T @ g

    return _record(tape, out, (a, b), vjp)


def linear(x, W, b=None):
    """Affine map ``W x + b`` applied to each row of ``x``.

    For a dual input the tangent is mapped by ``W`` alone.  ``W`` and ``b``
    may be tape tensors, in which case both channels contribute gradients.
    """
    if isinstance(x, Dual):
        return _mkdual(linear(x.primal, W, b), linear(x.tangent, W))
    xv, Wv = _raw(x), _raw(W)
    if np.ndim(Wv) != 2 or np.shape(xv)[-1] != Wv.shape[1]:
        raise DimensionError(f"cannot apply W{np.shape(Wv)} to x{np.shape(xv)}")
    bv = None if b is None else _raw(b)
    if bv is not None and np.shape(bv) != (Wv.shape[0],):
        raise DimensionError(f"bias shape {np.shape(bv)} for W{Wv.shape}")
    out = xv @ Wv.T
    if bv is not None:
        out = out + bv
    tape = _tape_of(x, W, b)
    if tape is None:
        return out

    if xv.ndim == 1:
        def vjp(g):
            return g @ Wv, np.outer(g, xv), g
    else:
        def vjp(g):
            return g @ Wv, g.T @ xv, g.sum(axis=0)

    if b is None:
        if xv.ndim == 1:
            return _record(tape, out, (x, W), lambda g: (g @ Wv, np.outer(g, xv)))
        return _record(tape, out, (x, W), lambda g: (g @ Wv, g.T @ xv))
    return _record(tape, out, (x, W, b), vjp)


# -- nonlinearities ---------------------------------------------------------

def relu(x):
    """``max(x, 0)``; the tangent is gated by ``x > 0`` (subgradient 0 at 0)."""
    if isinstance(x, Dual):
        gate = (value_of(x.primal) > 0).astype(np.float64)
        return _mkdual(relu(x.primal), mul(x.tangent, gate))
    if not isinstance(x, Tensor):
        return np.maximum(x, 0.0)
    gate = (x.value > 0).astype(np.float64)
    return x.tape._record(x.value * gate, (x,), lambda g: (g * gate,))


def tanh(x):
    if isinstance(x, Dual):
        y = tanh(x.primal)
        return _mkdual(y, mul(x.tangent, sub(1.0, mul(y, y))))
    if not isinstance(x, Tensor):
        return np.tanh(x)
    y = np.tanh(x.value)
    return x.tape._record(y, (x,), lambda g: (g * (1.0 - y * y),))


def sqrt(x):
    if isinstance(x, Dual):
        y = sqrt(x.primal)
        return _mkdual(y, div(x.tangent, mul(y, 2.0)))
    if not isinstance(x, Tensor):
        return np.sqrt(x)
    y = np.sqrt(x.value)
    return x.tape._record(y, (x,), lambda g: (g / (2.0 * y),))


# -- reductions -----------------------------------------------------------

def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    if isinstance(x, Dual):
        return _mkdual(sum(x.primal, axis, keepdims), sum(x.tangent, axis, keepdims))
    if not isinstance(x, Tensor):
        return np.sum(x, axis=axis, keepdims=keepdims)
    shape = x.value.shape
    out = np.sum(x.value, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return x.tape._record(np.asarray(out), (x,), vjp)


def mean(x, axis=None, keepdims=False):
    n = np.prod(_shape(x)) if axis is None else _shape(x)[axis]
    return div(sum(x, axis, keepdims), float(n))


def norm(x, axis=-1, keepdims=True):
    """Euclidean norm along ``axis``; gradient taken as 0 at the origin."""
    if isinstance(x, Dual):
        y = norm(x.primal, axis, keepdims)
        dot = sum(mul(x.primal, x.tangent), axis, keepdims)
        return _mkdual(y, div(dot, y))
    if not isinstance(x, Tensor):
        return np.sqrt(np.sum(x * x, axis=axis, keepdims=keepdims))
    xv = x.value
    y = np.sqrt(np.sum(xv * xv, axis=axis, keepdims=keepdims))

    def vjp(g):
        yk = y if keepdims else np.expand_dims(y, axis)
        gk = g if keepdims else np.expand_dims(g, axis)
        safe = np.where(yk > 0, yk, 1.0)
        return (gk * xv / safe * (yk > 0),)

    return x.tape._record(y, (x,), vjp)


def cosine(u, v, axis=-1):
    """Cosine of the angle between ``u`` and ``v`` along ``axis``."""
    return div(
        sum(mul(u, v), axis, keepdims=False),
        mul(norm(u, axis, keepdims=False), norm(v, axis, keepdims=False)),
    )


# -- structural ops ---------------------------------------------------------

def take(x, idx):
    """``x[idx]`` for basic or integer-array indices."""
    if isinstance(x, Dual):
        return _mkdual(take(x.primal, idx), take(x.tangent, idx))
    if not isinstance(x, Tensor):
        return np.asarray(x)[idx]
    xv = x.value
    out = np.array(xv[idx], dtype=np.float64)

    def vjp(g):
        full = np.zeros_like(xv)
        np.add.at(full, idx, g)
        return (full,)

    return x.tape._record(out, (x,), vjp)


def stack(xs, axis=-1):
    xs = list(xs)
    if any(isinstance(x, Dual) for x in xs):
        ds = [_dual(x) for x in xs]
        return _mkdual(stack([d.primal for d in ds], axis), stack([d.tangent for d in ds], axis))
    tape = _tape_of(*xs)
    out = np.stack([_raw(x) for x in xs], axis=axis)
    if tape is None:
        return out
    k = len(xs)
    return _record(
        tape, out, tuple(xs),
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(k)),
    )


# -- drivers ----------------------------------------------------------------

def jvp(f, x, v):
    """Directional derivative ``df/dx|_x . v`` via one tangent-propagated pass."""
    if _shape(x) != _shape(v):
        raise DimensionError(f"point shape {_shape(x)} != direction shape {_shape(v)}")
    out = f(Dual(x, v))
    if not isinstance(out, Dual):
        # f ignored its input; the derivative of a constant map is zero.
        return np.zeros(np.shape(value_of(out)))
    return out.tangent


def backward(root: Tensor) -> dict:
    if not isinstance(root, Tensor):
        raise ContractError("backward needs a recorded tensor")
    return root.tape.backward(root)
