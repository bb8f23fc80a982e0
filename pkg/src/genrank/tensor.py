"""Dense tensors with reverse-mode automatic differentiation.

Tensors wrap a numpy array (row-major) in either 32-bit (training default)
or 64-bit (gradient-check) precision. Operations build a DAG; calling
``backward()`` on a scalar walks it once in reverse topological order.
Every public operation validates that its output is finite.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

from .errors import InputError, NumericError, ShapeMismatch, UsageError

_GRAD_ENABLED = True

# additive mask value for disallowed attention positions: large enough to
# zero the softmax weight, small enough to stay finite in float32
NEG_MASK = -1e9


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference/scoring)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _check_finite(arr: np.ndarray, op: str) -> None:
    # fast path: a finite sum proves every entry finite; a non-finite sum is
    # either a real NaN/Inf or (astronomically rarely) overflow of finite
    # values, so only then pay for the exact min/max reduction. overflow of
    # finite values may emit numpy's once-per-process RuntimeWarning; wrapping
    # in errstate would cost more than the fast path saves. direct ufunc
    # reduces skip numpy's python wrappers and the bool temporary that
    # isfinite().all() would allocate
    if arr.size and not math.isfinite(np.add.reduce(arr, axis=None)):
        if not (math.isfinite(np.minimum.reduce(arr, axis=None))
                and math.isfinite(np.maximum.reduce(arr, axis=None))):
            raise NumericError(f"non-finite values produced by '{op}'")


class Tensor:
    """A node in the computation graph: cached forward value plus gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_op")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        _check_finite(arr, "tensor")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None
        self._op = "leaf"

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
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op})"

    # -- graph -----------------------------------------------------------

    def backward(self):
        """Accumulate gradients of this scalar into every reachable node.

        Visits each node exactly once, in reverse topological order.
        """
        if self.size != 1:
            raise UsageError(f"backward() requires a scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._vjp is not None:
                node._vjp(node.grad)

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- arithmetic (defined below as module functions) -------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, neg(_wrap(other, self.dtype)))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise UsageError("tensor/tensor division is not provided; multiply by a reciprocal")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def param(data, dtype=None) -> Tensor:
    """A trainable leaf tensor."""
    return Tensor(data, dtype=dtype, requires_grad=True)


def constant(data, dtype=None) -> Tensor:
    return Tensor(data, dtype=dtype, requires_grad=False)


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], op: str, vjp) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to the shape it was broadcast from."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise ops -------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _wrap(b, a.dtype)
    out_data = a.data + b.data

    def vjp(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return _make(out_data, (a, b), "add", vjp)


def mul(a: Tensor, b) -> Tensor:
    b = _wrap(b, a.dtype)
    out_data = a.data * b.data

    def vjp(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), "mul", vjp)


def neg(a: Tensor) -> Tensor:
    def vjp(g):
        a._accum(-g)

    return _make(-a.data, (a,), "neg", vjp)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def vjp(g):
        a._accum(g * out_data)

    return _make(out_data, (a,), "exp", vjp)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericError("log of a non-positive value")
    out_data = np.log(a.data)

    def vjp(g):
        a._accum(g / a.data)

    return _make(out_data, (a,), "log", vjp)


def clamp(a: Tensor, lo=None, hi=None) -> Tensor:
    """Clip values into [lo, hi]; gradient passes through the interior only."""
    out_data = np.clip(a.data, lo, hi)
    interior = np.ones(a.shape, dtype=bool)
    if lo is not None:
        interior &= a.data >= lo
    if hi is not None:
        interior &= a.data <= hi

    def vjp(g):
        a._accum(g * interior)

    return _make(out_data, (a,), "clamp", vjp)


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0)

    def vjp(g):
        a._accum(g * (a.data > 0))

    return _make(out_data, (a,), "relu", vjp)


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(a: Tensor) -> Tensor:
    """tanh-approximation GELU (smooth, so finite differences stay honest)."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * (x + _GELU_A * (x2 * x)))
    out_data = 0.5 * x * (1.0 + t)

    def vjp(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x2)
        local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
        a._accum(g * local)

    return _make(out_data, (a,), "gelu", vjp)


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate == 0."""
    if rate <= 0.0:
        return a
    if rate >= 1.0:
        raise UsageError("dropout rate must be < 1")
    keep = (rng.random(a.shape) >= rate).astype(a.dtype)
    scale = 1.0 / (1.0 - rate)
    out_data = a.data * keep * scale

    def vjp(g):
        a._accum(g * keep * scale)

    return _make(out_data, (a,), "dropout", vjp)


# -- reductions ------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            a._accum(np.broadcast_to(g, a.shape).astype(a.dtype, copy=False))
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        a._accum(np.broadcast_to(gg, a.shape).astype(a.dtype, copy=False))

    return _make(np.asarray(out_data), (a,), "sum", vjp)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


# -- shape ops ---------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    out_data = a.data.reshape(shape)

    def vjp(g):
        a._accum(g.reshape(a.shape))

    return _make(out_data, (a,), "reshape", vjp)


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    out_data = a.data.swapaxes(ax1, ax2)

    def vjp(g):
        a._accum(g.swapaxes(ax1, ax2))

    # copy keeps the row-major invariant instead of aliasing a transposed view
    return _make(np.ascontiguousarray(out_data), (a,), "swapaxes", vjp)


def getitem(a: Tensor, index) -> Tensor:
    out_data = a.data[index]

    def vjp(g):
        full = np.zeros_like(a.data)
        # add.at keeps contributions from duplicate fancy indices
        np.add.at(full, index, g)
        a._accum(full)

    return _make(np.ascontiguousarray(out_data), (a,), "getitem", vjp)


# -- linear algebra ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 1 or b.ndim < 1:
        raise ShapeMismatch("matmul requires at least 1-d operands")
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeMismatch(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeMismatch(f"matmul batch dims differ: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def vjp(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accum(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                # weight shared across leading dims: fold them before the product
                a2 = a.data.reshape(-1, a.shape[-1])
                g2 = g.reshape(-1, g.shape[-1])
                b._accum(a2.T @ g2)
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
                b._accum(_unbroadcast(gb, b.shape))

    return _make(out_data, (a, b), "matmul", vjp)


# -- neural-net ops ----------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - np.maximum.reduce(a.data, axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / np.add.reduce(e, axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * s).sum(axis=axis, keepdims=True)
        a._accum(s * (g - inner))

    return _make(s, (a,), "softmax", vjp)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - np.maximum.reduce(a.data, axis=axis, keepdims=True)
    lse = np.log(np.add.reduce(np.exp(z), axis=axis, keepdims=True))
    out_data = z - lse

    def vjp(g):
        soft = np.exp(out_data)
        a._accum(g - soft * g.sum(axis=axis, keepdims=True))

    return _make(out_data, (a,), "log_softmax", vjp)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeMismatch(f"layer_norm gain/bias must have shape ({d},)")
    n_inv = 1.0 / d
    mu = np.add.reduce(a.data, axis=-1, keepdims=True) * n_inv
    xm = a.data - mu
    var = np.add.reduce(xm * xm, axis=-1, keepdims=True) * n_inv
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xm * inv
    out_data = xhat * gain.data + bias.data

    def vjp(g):
        if gain.requires_grad:
            gain._accum((g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            bias._accum(g.reshape(-1, d).sum(axis=0))
        if a.requires_grad:
            gx = g * gain.data
            m1 = np.add.reduce(gx, axis=-1, keepdims=True) * n_inv
            m2 = np.add.reduce(gx * xhat, axis=-1, keepdims=True) * n_inv
            a._accum((gx - m1 - xhat * m2) * inv)

    return _make(out_data, (a, gain, bias), "layer_norm", vjp)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup into an embedding table; backward scatters into the rows used."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise InputError("embedding ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise InputError(
            f"embedding id out of range [0, {weight.shape[0]}): "
            f"min={ids.min()}, max={ids.max()}"
        )
    out_data = weight.data[ids]

    def vjp(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[-1]))
        weight._accum(full)

    return _make(np.ascontiguousarray(out_data), (weight,), "embedding", vjp)


def take_along_last(a: Tensor, idx: np.ndarray) -> Tensor:
    """Pick one entry per position along the last axis (e.g. target-token log-probs)."""
    idx = np.asarray(idx)
    expanded = np.expand_dims(idx, -1)
    out_data = np.take_along_axis(a.data, expanded, axis=-1)[..., 0]

    def vjp(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, expanded, np.expand_dims(g, -1), axis=-1)
        a._accum(full)

    return _make(out_data, (a,), "take_along_last", vjp)
