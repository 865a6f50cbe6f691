"""
Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Values are computed eagerly.  An operation records its parents and a
vector-Jacobian closure only when at least one operand requires a gradient,
so arithmetic on constants costs nothing extra.  :func:`backward` walks the
recorded graph in reverse topological order and *adds* the adjoints of the
leaves (usually :class:`Parameter`) into ``leaf.grad``; callers zero them
explicitly.

Broadcasting is supported for the elementwise binary ops (``add``, ``sub``,
``mul``); everything else expects exact shapes.
"""

import numpy as np
from scipy.special import expit

from .errors import DomainError, ShapeError, StateError

__all__ = ['Node', 'Parameter', 'constant', 'detach', 'backward', 'zero_grad',
           'add', 'sub', 'mul', 'neg', 'scale', 'matmul', 'sum', 'mean',
           'square', 'sqrt', 'reciprocal', 'log2', 'sigmoid', 'tanh',
           'concat', 'slice', 'reshape', 'clamp_min', 'lstm_cell', 'adam_step']

_LN2 = np.log(2.0)


class Node:
    """A value in the computation graph."""

    __slots__ = ('value', 'parents', 'vjp', 'grad', 'requires_grad', 'op', '_consumed')

    def __init__(self, value, parents=(), vjp=None, op='const', requires_grad=False):
        self.value = value if type(value) is np.ndarray else np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.vjp = vjp
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        self._consumed = False

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.value.shape})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice(self, index)


class Parameter(Node):
    """A trainable leaf carrying its own Adam moment estimates."""

    __slots__ = ('m', 'v', 'step', 'name')

    def __init__(self, value, name=''):
        super().__init__(np.array(value, dtype=np.float64), op='param', requires_grad=True)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)
        self.step = 0
        self.name = name


def constant(value):
    return Node(np.asarray(value, dtype=np.float64))


def _lift(x):
    return x if isinstance(x, Node) else constant(x)


def _make(value, parents, vjp, op):
    if any(p.requires_grad for p in parents):
        return Node(value, parents, vjp, op, requires_grad=True)
    return Node(value, op=op)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


def detach(x):
    """Same value, no history: gradients stop here."""
    return Node(_lift(x).value, op='detach')


def add(a, b):
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a, b, 'add')
    return _make(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), 'add')


def sub(a, b):
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a, b, 'sub')
    return _make(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), 'sub')


def mul(a, b):
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a, b, 'mul')
    av, bv = a.value, b.value
    return _make(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)), 'mul')


def neg(a):
    a = _lift(a)
    return _make(-a.value, (a,), lambda g: (-g,), 'neg')


def scale(a, c):
    """Multiply by a plain float ``c``."""
    a = _lift(a)
    c = float(c)
    return _make(c * a.value, (a,), lambda g: (c * g,), 'scale')


class _Outer:
    """Deferred ``lhs.T @ rhs``; contributions to one leaf are contracted in
    a single product at the end of :func:`backward`."""

    __slots__ = ('lhs', 'rhs')

    def __init__(self, lhs, rhs):
        self.lhs, self.rhs = lhs, rhs

    def materialize(self):
        return self.lhs.T @ self.rhs


def _contract(outers):
    if len(outers) == 1:
        return outers[0].materialize()
    lhs = np.concatenate([o.lhs for o in outers], axis=0)
    rhs = np.concatenate([o.rhs for o in outers], axis=0)
    return lhs.T @ rhs


def matmul(a, b):
    a, b = _lift(a), _lift(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    need_a, need_b = a.requires_grad, b.requires_grad

    def vjp(g):
        return (g @ bv.T if need_a else None, _Outer(av, g) if need_b else None)

    return _make(av @ bv, (a, b), vjp, 'matmul')


def sum(a, axis=None, keepdims=False):
    a = _lift(a)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(a.value, axis=axis, keepdims=keepdims), (a,), vjp, 'sum')


def mean(a, axis=None):
    a = _lift(a)
    n = a.value.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis), 1.0 / n)


def square(a):
    a = _lift(a)
    av = a.value
    return _make(av * av, (a,), lambda g: (2.0 * av * g,), 'square')


def sqrt(a):
    a = _lift(a)
    if np.any(a.value < 0):
        raise DomainError("sqrt of a negative value")
    out = np.sqrt(a.value)
    return _make(out, (a,), lambda g: (0.5 * g / out,), 'sqrt')


def reciprocal(a):
    a = _lift(a)
    if np.any(a.value == 0):
        raise DomainError("reciprocal of zero")
    out = 1.0 / a.value
    return _make(out, (a,), lambda g: (-g * out * out,), 'reciprocal')


def log2(a):
    a = _lift(a)
    av = a.value
    if np.any(~(av > 0)):
        raise DomainError(f"log2 of a nonpositive value (min {np.min(av)})")
    return _make(np.log2(av), (a,), lambda g: (g / (av * _LN2),), 'log2')


def sigmoid(a):
    a = _lift(a)
    out = 0.5 * (np.tanh(0.5 * a.value) + 1.0)  # overflow-free logistic
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), 'sigmoid')


def tanh(a):
    a = _lift(a)
    out = np.tanh(a.value)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), 'tanh')


def concat(nodes, axis=0):
    nodes = [_lift(n) for n in nodes]
    try:
        value = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    splits = np.cumsum([n.shape[axis] for n in nodes])[:-1]
    return _make(value, tuple(nodes), lambda g: tuple(np.split(g, splits, axis=axis)), 'concat')


def slice(a, index):
    """Basic (non-fancy) indexing."""
    a = _lift(a)
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        out[index] = g
        return (out,)

    return _make(a.value[index], (a,), vjp, 'slice')


def reshape(a, shape):
    a = _lift(a)
    old = a.shape
    try:
        value = a.value.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {exc}") from None
    return _make(value, (a,), lambda g: (g.reshape(old),), 'reshape')


def clamp_min(a, floor):
    """``max(a, floor)``; the derivative is 1 where ``a >= floor``."""
    a = _lift(a)
    keep = a.value >= floor
    return _make(np.where(keep, a.value, floor), (a,), lambda g: (g * keep,), 'clamp_min')


def lstm_cell(x, h, c, W, b):
    """Fused LSTM cell; returns the node ``[h_new, c_new]`` (``n x 2 hidden``).

    ``W`` is ``(in + hidden) x 4 hidden`` acting on ``[x, h]``; gate blocks
    are ordered input, forget, candidate, output.  Equivalent to the
    composition of ``matmul``, ``sigmoid``, ``tanh`` and ``mul`` but records
    one node instead of about twenty.
    """
    x, h, c, W, b = (_lift(v) for v in (x, h, c, W, b))
    n_in = x.shape[1]
    hidden = h.shape[1]
    if W.shape != (n_in + hidden, 4 * hidden) or b.shape != (4 * hidden,) or c.shape != h.shape:
        raise ShapeError(f"lstm_cell: x {x.shape}, h {h.shape}, c {c.shape}, W {W.shape}, b {b.shape}")
    xh = np.concatenate([x.value, h.value], axis=1)
    z = xh @ W.value + b.value
    sig = expit(z[:, :2 * hidden])
    i_gate, f_gate = sig[:, :hidden], sig[:, hidden:]
    cand = np.tanh(z[:, 2 * hidden:3 * hidden])
    o_gate = expit(z[:, 3 * hidden:])
    c_new = f_gate * c.value + i_gate * cand
    tc = np.tanh(c_new)
    h_new = o_gate * tc
    Wv, cv = W.value, c.value
    need_in = x.requires_grad or h.requires_grad

    def vjp(g):
        dh, dc = g[:, :hidden], g[:, hidden:]
        dc = dc + dh * o_gate * (1.0 - tc * tc)
        dz = np.empty_like(z)
        dz[:, :hidden] = dc * cand * i_gate * (1.0 - i_gate)
        dz[:, hidden:2 * hidden] = dc * cv * f_gate * (1.0 - f_gate)
        dz[:, 2 * hidden:3 * hidden] = dc * i_gate * (1.0 - cand * cand)
        dz[:, 3 * hidden:] = dh * tc * o_gate * (1.0 - o_gate)
        dxh = dz @ Wv.T if need_in else None
        return (None if dxh is None else dxh[:, :n_in],
                None if dxh is None else dxh[:, n_in:],
                dc * f_gate,
                _Outer(xh, dz) if W.requires_grad else None,
                dz.sum(axis=0))

    return _make(np.concatenate([h_new, c_new], axis=1), (x, h, c, W, b), vjp, 'lstm_cell')


def _topological(root):
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order[::-1]


def backward(root):
    """Accumulate d(root)/d(leaf) into ``grad`` of every reachable leaf.

    Leaves are Parameters and any node built with ``requires_grad=True`` and
    no parents.  Intermediate adjoints are discarded.
    """
    if root.value.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    if root._consumed:
        raise StateError("backward was already run from this root")
    root._consumed = True
    if not root.requires_grad:
        return
    adjoint = {id(root): np.ones_like(root.value)}
    deferred = {}
    for node in _topological(root):
        g = adjoint.pop(id(node), None)
        if node.vjp is None:
            outers = deferred.pop(id(node), None)
            if outers:
                g = _contract(outers) if g is None else g + _contract(outers)
            if g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if isinstance(pg, _Outer):
                if parent.vjp is None:
                    deferred.setdefault(key, []).append(pg)
                    continue
                pg = pg.materialize()
            adjoint[key] = pg if key not in adjoint else adjoint[key] + pg


def zero_grad(params):
    for p in params:
        p.grad = None


def adam_step(p, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update of ``p.value`` in place; grads are kept."""
    if p.grad is None:
        raise StateError(f"parameter {p.name or '?'} has no gradient")
    g = p.grad
    p.step += 1
    p.m = beta1 * p.m + (1.0 - beta1) * g
    p.v = beta2 * p.v + (1.0 - beta2) * g * g
    m_hat = p.m / (1.0 - beta1 ** p.step)
    v_hat = p.v / (1.0 - beta2 ** p.step)
    p.value = p.value - lr * m_hat / (np.sqrt(v_hat) + eps)
    return p
