"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything is small enough at desk scale that each value is a plain numpy
float64 array and every differentiable operation records a backward closure
on the active tape. Operations never mutate their inputs, and every forward
result is checked for NaN/Inf so numerical failures surface at the op that
produced them instead of corrupting a training run silently.
"""

from __future__ import annotations

import numpy as np


class NonFiniteError(ArithmeticError):
    """A forward operation produced NaN or Inf."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


_ACTIVE_TAPE = None


def active_tape():
    return _ACTIVE_TAPE


class Tensor:
    """Immutable-by-convention dense array, optionally tracked by a Tape.

    Parameters are plain Tensors too; what makes a value differentiable is
    only whether a tape was active when the ops producing it ran.
    """

    __slots__ = ("data",)

    def __init__(self, data):
        self.data = np.array(data, dtype=np.float64)

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_err(self)

    def copy(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"

    # operator sugar; right-hand sides may be plain arrays/scalars (constants)
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _scalar_err(t):
    raise ShapeError(f"expected a scalar tensor, got shape {t.shape}")


class Tape:
    """Ordered record of operations plus accumulated gradients.

    Backward walks the records in reverse creation order exactly once;
    since every op's inputs exist before its output, that order is a valid
    topological order of the computation graph.
    """

    def __init__(self):
        self._records = []  # (output tensor, backward closure)
        self._grads = {}  # id(tensor) -> ndarray
        self._live = {}  # id(tensor) -> tensor, keeps ids stable
        self._done = False

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a tape is already active; tapes are single-threaded")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def record(self, out, backward_fn):
        self._records.append((out, backward_fn))

    def accumulate(self, t, grad):
        if grad.shape != t.data.shape:
            raise ShapeError(f"gradient shape {grad.shape} != tensor shape {t.data.shape}")
        key = id(t)
        self._live[key] = t
        if key in self._grads:
            self._grads[key] = self._grads[key] + grad
        else:
            self._grads[key] = grad

    def grad(self, t):
        """Accumulated gradient of `t`; zeros if `t` was unreachable."""
        return self._grads.get(id(t), np.zeros_like(t.data))

    def backward(self, loss):
        if loss.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
        if self._done:
            raise RuntimeError("backward was already run on this tape")
        self._done = True
        self.accumulate(loss, np.ones_like(loss.data))
        for out, fn in reversed(self._records):
            g = self._grads.get(id(out))
            if g is not None:
                fn(g)


def _val(x):
    """Raw ndarray of a Tensor or array-like constant."""
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def _make(data):
    arr = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("operation produced a non-finite value")
    t = Tensor.__new__(Tensor)
    t.data = arr
    return t


def _unbroadcast(grad, shape):
    """Reduce a broadcasted gradient back to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _record(out, inputs, grad_fns):
    """Attach backward closures for `inputs` (Tensor entries only)."""
    tape = _ACTIVE_TAPE
    if tape is None:
        return
    tracked = [(t, fn) for t, fn in zip(inputs, grad_fns) if isinstance(t, Tensor)]
    if not tracked:
        return

    def backward(g):
        for t, fn in tracked:
            tape.accumulate(t, fn(g))

    tape.record(out, backward)


# ---------------------------------------------------------------------------
# elementwise / arithmetic


def add(a, b):
    av, bv = _val(a), _val(b)
    out = _make(av + bv)
    _record(out, (a, b), (lambda g: _unbroadcast(g, av.shape), lambda g: _unbroadcast(g, bv.shape)))
    return out


def sub(a, b):
    av, bv = _val(a), _val(b)
    out = _make(av - bv)
    _record(out, (a, b), (lambda g: _unbroadcast(g, av.shape), lambda g: _unbroadcast(-g, bv.shape)))
    return out


def mul(a, b):
    av, bv = _val(a), _val(b)
    out = _make(av * bv)
    _record(out, (a, b), (lambda g: _unbroadcast(g * bv, av.shape), lambda g: _unbroadcast(g * av, bv.shape)))
    return out


def pow_const(x, p):
    xv = _val(x)
    out = _make(xv ** p)
    _record(out, (x,), (lambda g: g * p * xv ** (p - 1),))
    return out


def relu(x):
    xv = _val(x)
    out = _make(np.maximum(xv, 0.0))
    _record(out, (x,), (lambda g: g * (xv > 0.0),))
    return out


def exp(x):
    xv = _val(x)
    ev = np.exp(xv)
    out = _make(ev)
    _record(out, (x,), (lambda g: g * ev,))
    return out


def log(x):
    xv = _val(x)
    out = _make(np.log(xv))
    _record(out, (x,), (lambda g: g / xv,))
    return out


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    av, bv = _val(a), _val(b)
    if av.ndim < 2 or bv.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")
    if av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {av.shape} x {bv.shape}")
    out = _make(np.matmul(av, bv))

    def grad_a(g):
        return _unbroadcast(np.matmul(g, np.swapaxes(bv, -1, -2)), av.shape)

    def grad_b(g):
        return _unbroadcast(np.matmul(np.swapaxes(av, -1, -2), g), bv.shape)

    _record(out, (a, b), (grad_a, grad_b))
    return out


# ---------------------------------------------------------------------------
# reductions


def sum_(x, axis=None, keepdims=False):
    xv = _val(x)
    out = _make(xv.sum(axis=axis, keepdims=keepdims))

    def grad(g):
        if axis is None:
            return np.broadcast_to(g, xv.shape).copy() if keepdims or g.ndim == 0 else np.full(xv.shape, g)
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, xv.shape).copy()

    _record(out, (x,), (grad,))
    return out


def mean(x, axis=None, keepdims=False):
    xv = _val(x)
    n = xv.size if axis is None else xv.shape[axis]
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


def max_over_axis(x, axis):
    """Max along one axis; returns (values, argmax indices).

    Ties break toward the lowest index (numpy argmax), which keeps
    relevant-clip sampling deterministic.
    """
    xv = _val(x)
    idx = np.argmax(xv, axis=axis)
    vals = np.take_along_axis(xv, np.expand_dims(idx, axis), axis=axis).squeeze(axis)
    out = _make(vals)

    def grad(g):
        gx = np.zeros_like(xv)
        np.put_along_axis(gx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return gx

    _record(out, (x,), (grad,))
    return out, idx


def softmax(x, axis=-1):
    xv = _val(x)
    shifted = xv - xv.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = _make(s)

    def grad(g):
        inner = (g * s).sum(axis=axis, keepdims=True)
        return s * (g - inner)

    _record(out, (x,), (grad,))
    return out


def logsumexp(x, axis=-1, keepdims=False):
    xv = _val(x)
    m = xv.max(axis=axis, keepdims=True)
    e = np.exp(xv - m)
    se = e.sum(axis=axis, keepdims=True)
    res = m + np.log(se)
    out = _make(res if keepdims else res.squeeze(axis))
    soft = e / se

    def grad(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        return soft * gg

    _record(out, (x,), (grad,))
    return out


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x, shape):
    xv = _val(x)
    out = _make(xv.reshape(shape))
    _record(out, (x,), (lambda g: g.reshape(xv.shape),))
    return out


def swapaxes(x, a, b):
    xv = _val(x)
    out = _make(np.swapaxes(xv, a, b))
    _record(out, (x,), (lambda g: np.swapaxes(g, a, b),))
    return out


def concat(parts, axis=0):
    vals = [_val(p) for p in parts]
    out = _make(np.concatenate(vals, axis=axis))
    tape = _ACTIVE_TAPE
    if tape is not None:
        offsets = np.cumsum([0] + [v.shape[axis] for v in vals])

        def backward(g):
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                if isinstance(p, Tensor):
                    sl = [slice(None)] * g.ndim
                    sl[axis] = slice(lo, hi)
                    tape.accumulate(p, g[tuple(sl)])

        tape.record(out, backward)
    return out


def slice_axis(x, axis, start, stop):
    xv = _val(x)
    sl = [slice(None)] * xv.ndim
    sl[axis] = slice(start, stop)
    out = _make(xv[tuple(sl)])

    def grad(g):
        gx = np.zeros_like(xv)
        gx[tuple(sl)] = g
        return gx

    _record(out, (x,), (grad,))
    return out


def take(x, indices, axis=0):
    """Index-select along an axis; backward scatter-adds (repeats allowed)."""
    xv = _val(x)
    idx = np.asarray(indices, dtype=np.intp)
    out = _make(np.take(xv, idx, axis=axis))

    def grad(g):
        gx = np.zeros_like(xv)
        moved = np.moveaxis(gx, axis, 0)
        np.add.at(moved, idx.reshape(-1), np.moveaxis(g, axis, 0).reshape((-1,) + moved.shape[1:]))
        return gx

    _record(out, (x,), (grad,))
    return out


def embedding_lookup(table, indices):
    return take(table, indices, axis=0)


# ---------------------------------------------------------------------------
# normalization / similarity


def l2_normalize(x, axis=-1):
    """Rows scaled to unit L2 norm; all-zero rows stay zero (by convention)."""
    xv = _val(x)
    norms = np.sqrt((xv * xv).sum(axis=axis, keepdims=True))
    safe = np.where(norms > 0.0, norms, 1.0)
    y = xv / safe
    out = _make(y)

    def grad(g):
        inner = (xv * g).sum(axis=axis, keepdims=True)
        gx = g / safe - xv * inner / safe ** 3
        return np.where(norms > 0.0, gx, 0.0)

    _record(out, (x,), (grad,))
    return out


def cosine_similarity(a, b):
    """Cosine of two equal-length vectors; 0 if either has zero norm."""
    av, bv = _val(a), _val(b)
    if av.shape != bv.shape or av.ndim != 1:
        raise ShapeError(f"cosine_similarity expects equal-length vectors, got {av.shape}, {bv.shape}")
    na = float(np.sqrt(av @ av))
    nb = float(np.sqrt(bv @ bv))
    if na == 0.0 or nb == 0.0:
        out = _make(0.0)
        _record(out, (a, b), (lambda g: np.zeros_like(av), lambda g: np.zeros_like(bv)))
        return out
    c = float(av @ bv / (na * nb))
    out = _make(c)

    def grad_a(g):
        return g * (bv / (na * nb) - c * av / (na * na))

    def grad_b(g):
        return g * (av / (na * nb) - c * bv / (nb * nb))

    _record(out, (a, b), (grad_a, grad_b))
    return out


# ---------------------------------------------------------------------------
# convolution


def conv1d(x, kernel, bias=None):
    """Same-length 1-D cross-correlation over the sequence axis.

    x: [..., L, D], kernel: [k, D, Dout] with k odd; zero padding keeps the
    output length equal to the input length.
    """
    xv, kv = _val(x), _val(kernel)
    if kv.ndim != 3:
        raise ShapeError(f"conv1d kernel must be [k, D, Dout], got {kv.shape}")
    k, d_in, _ = kv.shape
    if k % 2 != 1:
        raise ShapeError("conv1d kernel width must be odd")
    if xv.shape[-1] != d_in:
        raise ShapeError(f"conv1d feature dims disagree: input {xv.shape[-1]}, kernel {d_in}")
    length = xv.shape[-2]
    pad = k // 2
    pad_spec = [(0, 0)] * (xv.ndim - 2) + [(pad, pad), (0, 0)]
    xp = np.pad(xv, pad_spec)
    res = np.zeros(xv.shape[:-1] + (kv.shape[2],))
    for t in range(k):
        res += np.matmul(xp[..., t : t + length, :], kv[t])
    out = _make(res)
    tape = _ACTIVE_TAPE
    if tape is not None:

        def backward(g):
            if isinstance(x, Tensor):
                gxp = np.zeros_like(xp)
                for t in range(k):
                    gxp[..., t : t + length, :] += np.matmul(g, kv[t].T)
                tape.accumulate(x, gxp[..., pad : pad + length, :])
            if isinstance(kernel, Tensor):
                gk = np.zeros_like(kv)
                for t in range(k):
                    seg = xp[..., t : t + length, :]
                    gk[t] = np.tensordot(seg, g, axes=(tuple(range(seg.ndim - 1)), tuple(range(g.ndim - 1))))
                tape.accumulate(kernel, gk)

        tape.record(out, backward)
    if bias is not None:
        out = add(out, bias)
    return out


# ---------------------------------------------------------------------------
# losses


def bce_with_logits(logits, labels):
    """Per-element binary cross-entropy from raw logits, numerically stable."""
    zv = _val(logits)
    yv = _val(labels)
    loss = np.maximum(zv, 0.0) - zv * yv + np.log1p(np.exp(-np.abs(zv)))
    out = _make(loss)
    sig = 1.0 / (1.0 + np.exp(-zv))
    _record(out, (logits,), (lambda g: g * (sig - yv),))
    return out
