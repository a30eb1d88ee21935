"""Small reverse-mode autodiff engine over numpy arrays.

Only the operator alphabet needed by the prompt/alignment graph is provided.
Operations executed while a :class:`Tape` is active are recorded on it in
creation order, which is already a topological order, so ``backward`` is a
single reverse sweep.

    >>> with Tape() as tape:
    ...     w = parameter([[1.0, 2.0]])
    ...     loss = sum_all(w * w)
    >>> tape.backward(loss)[w]
    array([[2., 4.]])
"""
from __future__ import annotations

import math

import numpy as np

from .errors import (
    ContractError,
    DegenerateInputError,
    DeterminismError,
    DimensionError,
    ParameterError,
)

DTYPE = np.float64
EPS_NORM = 1e-12

_TAPES: list["Tape"] = []


class Tensor:
    """Dense array plus the bookkeeping needed to replay its adjoint."""

    __slots__ = ("data", "requires_grad", "name", "_inputs", "_vjp", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._inputs = ()
        self._vjp = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def T(self):
        return swap_last(self)

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data.copy()

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

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
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return mul(self, reciprocal(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


def tensor(data, requires_grad=False, name=None):
    if isinstance(data, Tensor):
        return data
    return Tensor(data, requires_grad=requires_grad, name=name)


def parameter(data, name=None):
    """A learnable leaf."""
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True, name=name)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of operations; supports nesting as a context manager."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss: Tensor) -> dict:
        """Return ``{leaf: dloss/dleaf}`` for every learnable leaf reached."""
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads = {id(loss): np.ones_like(loss.data)}
        leaves = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            needs = tuple(inp.requires_grad for inp in node._inputs)
            for inp, gi in zip(node._inputs, node._vjp(g, needs)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if inp._vjp is None:
                    leaves[key] = inp
        return {leaf: grads[key] for key, leaf in leaves.items() if key in grads}


def backward(tape: Tape, loss: Tensor) -> dict:
    return tape.backward(loss)


def _node(data, inputs, vjp, op):
    out = Tensor(data)
    out.op = op
    if any(i.requires_grad for i in inputs):
        out.requires_grad = True
        out._inputs = tuple(inputs)
        out._vjp = vjp
        if _TAPES:
            _TAPES[-1].nodes.append(out)
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# elementwise --------------------------------------------------------------

def add(a, b):
    a, b = _wrap(a), _wrap(b)

    def vjp(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None)

    return _node(a.data + b.data, (a, b), vjp, "add")


def sub(a, b):
    a, b = _wrap(a), _wrap(b)

    def vjp(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(-g, b.shape) if needs[1] else None)

    return _node(a.data - b.data, (a, b), vjp, "sub")


def mul(a, b):
    a, b = _wrap(a), _wrap(b)

    def vjp(g, needs):
        return (_unbroadcast(g * b.data, a.shape) if needs[0] else None,
                _unbroadcast(g * a.data, b.shape) if needs[1] else None)

    return _node(a.data * b.data, (a, b), vjp, "mul")


def scale(a, c: float):
    a = _wrap(a)
    c = float(c)
    return _node(a.data * c, (a,), lambda g, needs: (g * c,), "scale")


def reciprocal(a):
    a = _wrap(a)
    out = 1.0 / a.data
    return _node(out, (a,), lambda g, needs: (-g * out * out,), "reciprocal")


def log(a):
    a = _wrap(a)
    return _node(np.log(a.data), (a,), lambda g, needs: (g / a.data,), "log")


def relu(a):
    a = _wrap(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g, needs: (g * mask,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """tanh approximation of GELU."""
    a = _wrap(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def vjp(g, needs):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * d_inner),)

    return _node(out, (a,), vjp, "gelu")


# linear algebra -----------------------------------------------------------

def matmul(a, b):
    """Matrix product; leading axes broadcast like ``np.matmul``."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def vjp(g, needs):
        ga = gb = None
        if needs[0]:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if needs[1]:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _node(out, (a, b), vjp, "matmul")


def swap_last(a):
    a = _wrap(a)
    return _node(np.swapaxes(a.data, -1, -2), (a,),
                 lambda g, needs: (np.swapaxes(g, -1, -2),), "swap_last")


def transpose(a, axes):
    a = _wrap(a)
    inv = np.argsort(axes)
    return _node(np.transpose(a.data, axes), (a,),
                 lambda g, needs: (np.transpose(g, inv),), "transpose")


def reshape(a, shape):
    a = _wrap(a)
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g, needs: (g.reshape(old),), "reshape")


def broadcast_to(a, shape):
    a = _wrap(a)
    return _node(np.broadcast_to(a.data, shape).copy(), (a,),
                 lambda g, needs: (_unbroadcast(g, a.shape),), "broadcast_to")


def concat(parts, axis=0):
    """Concatenate along ``axis`` (row concatenation for prompt insertion)."""
    parts = [_wrap(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum(sizes)[:-1]

    def vjp(g, needs):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(np.concatenate([p.data for p in parts], axis=axis), parts, vjp, "concat")


def index(a, key):
    """Slicing or integer gathering; repeated indices accumulate in the adjoint."""
    a = _wrap(a)
    out = a.data[key]

    def vjp(g, needs):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        return (full,)

    return _node(np.array(out), (a,), vjp, "index")


def slice_rows(a, start, stop, axis=-2):
    key = [slice(None)] * a.ndim
    key[axis] = slice(start, stop)
    return index(a, tuple(key))


def pick(a, labels):
    """``out[i] = a[i, labels[i]]`` for a 2-D ``a``."""
    a = _wrap(a)
    labels = np.asarray(labels, dtype=np.int64)
    rows = np.arange(a.shape[0])

    def vjp(g, needs):
        full = np.zeros_like(a.data)
        full[rows, labels] = g
        return (full,)

    return _node(a.data[rows, labels], (a,), vjp, "pick")


# reductions ---------------------------------------------------------------

def sum_all(a):
    a = _wrap(a)
    return _node(np.asarray(a.data.sum()), (a,),
                 lambda g, needs: (np.broadcast_to(g, a.shape).copy(),), "sum")


def sum_axis(a, axis, keepdims=False):
    a = _wrap(a)

    def vjp(g, needs):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp, "sum_axis")


def mean_rows(a, axis=0, keepdims=False):
    """Mean over ``axis`` (rows by default)."""
    a = _wrap(a)
    n = a.shape[axis]
    return scale(sum_axis(a, axis, keepdims), 1.0 / n)


# normalisation and softmax ------------------------------------------------

def layer_norm(a, eps=1e-5):
    """Normalise the last axis to zero mean, unit variance (no affine)."""
    a = _wrap(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    inv = 1.0 / np.sqrt((xc**2).mean(axis=-1, keepdims=True) + eps)
    y = xc * inv

    def vjp(g, needs):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _node(y, (a,), vjp, "layer_norm")


def softmax_rows(a, t=1.0):
    """Softmax over the last axis of ``a / t`` with max subtraction."""
    if not t > 0:
        raise ParameterError(f"softmax temperature must be positive, got {t}")
    a = _wrap(a)
    z = a.data / t
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def vjp(g, needs):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)) / t,)

    return _node(s, (a,), vjp, "softmax")


def log_softmax_rows(a, t=1.0):
    if not t > 0:
        raise ParameterError(f"softmax temperature must be positive, got {t}")
    a = _wrap(a)
    z = a.data / t
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def vjp(g, needs):
        return ((g - s * g.sum(axis=-1, keepdims=True)) / t,)

    return _node(out, (a,), vjp, "log_softmax")


def l2_normalize_rows(a, eps=EPS_NORM):
    """Scale every row (last axis) to unit L2 norm; zero rows are an error."""
    a = _wrap(a)
    norms = np.sqrt((a.data**2).sum(axis=-1, keepdims=True))
    if np.any(norms < eps):
        bad = np.argwhere(norms[..., 0] < eps)[:5].tolist()
        raise DegenerateInputError(f"cannot normalise rows with norm < {eps}: {bad}")
    y = a.data / norms

    def vjp(g, needs):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norms,)

    return _node(y, (a,), vjp, "l2_normalize")


def cosine_similarity(a, b):
    """``sim[i, j] = cos(a_i, b_j)`` for row sets ``a`` (m x d), ``b`` (n x d)."""
    return matmul(l2_normalize_rows(a), swap_last(l2_normalize_rows(b)))


def cross_entropy_from_probs(probs, labels):
    """Per-row ``-log probs[i, labels[i]]``."""
    return scale(log(pick(probs, labels)), -1.0)


PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "reciprocal": reciprocal,
    "log": log,
    "concat": concat,
    "index": index,
    "pick": pick,
    "swap_last": swap_last,
    "transpose": transpose,
    "reshape": reshape,
    "broadcast_to": broadcast_to,
    "layer_norm": layer_norm,
    "gelu": gelu,
    "relu": relu,
    "softmax": softmax_rows,
    "log_softmax": log_softmax_rows,
    "l2_normalize": l2_normalize_rows,
    "sum": sum_all,
    "sum_axis": sum_axis,
}


def finite_diff_check(f, params, h=1e-6):
    """Compare tape gradients of ``f(params)`` to central differences.

    ``f`` takes the list of parameter tensors and returns a scalar tensor.
    Returns ``max |g_tape - g_fd| / max(1, |g_fd|)`` over every coordinate of
    every parameter.
    """
    params = list(params)
    with Tape() as tape:
        loss = f(params)
    grads = tape.backward(loss)
    again = f(params)
    if loss.data.tobytes() != again.data.tobytes():
        raise DeterminismError("objective is not deterministic across evaluations")

    worst = 0.0
    for p in params:
        g_tape = grads.get(p, np.zeros_like(p.data))
        orig = p.data
        flat = orig.reshape(-1)
        for i in range(flat.size):
            bumped = flat.copy()
            bumped[i] += h
            p.data = bumped.reshape(orig.shape)
            up = float(f(params).data)
            bumped[i] = flat[i] - h
            p.data = bumped.reshape(orig.shape)
            down = float(f(params).data)
            g_fd = (up - down) / (2 * h)
            err = abs(g_tape.reshape(-1)[i] - g_fd) / max(1.0, abs(g_fd))
            worst = max(worst, err)
        p.data = orig
    return worst
