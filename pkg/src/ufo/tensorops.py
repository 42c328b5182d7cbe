"""Minimal differentiable array substrate.

A ``Tensor`` wraps a numpy array and records the operation graph as it is
built; :func:`backward` replays that graph in reverse topological order and
accumulates exact adjoints for the fixed operator set used by the model
(matmul, elementwise maps, softmax, reductions, gathers).  There is
deliberately no general autodiff machinery: every adjoint is hand-written
and cross-checked against central finite differences by the test suite.

Compute runs in float32 by default; :func:`precision` switches the whole
substrate to float64 for verification (gradient checks run there).
Randomness is counter-based (Philox) and keyed by ``(stream, seed)`` so any
draw can be replayed independently of call order.
"""

from __future__ import annotations

import contextlib
import hashlib
from typing import Callable, Iterable, Sequence

import numpy as np


class NumericError(ArithmeticError):
    """An operation produced a non-finite value."""


_DTYPE = np.float32
_GRAD_ENABLED = True


def default_dtype():
    """Return the dtype new tensors are created with."""
    return _DTYPE


@contextlib.contextmanager
def precision(mode: str):
    """Temporarily switch the compute dtype: ``"float32"`` or ``"float64"``.

    Verification (finite-difference gradient checks) runs under
    ``precision("float64")``; normal training and inference stay in float32.
    """
    global _DTYPE
    if mode not in ("float32", "float64"):
        raise ValueError(f"unknown precision mode {mode!r}")
    prev = _DTYPE
    _DTYPE = np.float32 if mode == "float32" else np.float64
    try:
        yield
    finally:
        _DTYPE = prev


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference fast path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values produced by {op}")
    return arr


def _checked(fn, x: np.ndarray, op: str) -> np.ndarray:
    # overflow/domain errors surface as NumericError, not numpy warnings
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        return _check_finite(fn(x), op)


class Tensor:
    """A dense array plus its position in the recorded operation graph.

    ``_parents`` holds ``(parent, vjp)`` pairs; ``vjp`` maps the adjoint of
    this node to the adjoint contribution of that parent.  Leaves have no
    parents.  ``backward`` assigns ``.grad`` (it does not accumulate across
    separate backward calls).
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents")

    # keep numpy from broadcasting over Tensor objects; reflected operators
    # (e.g. ndarray * Tensor -> Tensor.__rmul__) handle mixed expressions
    __array_ufunc__ = None

    def __init__(self, data: np.ndarray, requires_grad: bool = False,
                 _parents: tuple = ()):
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    # -- operators -----------------------------------------------------
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
        return index(self, idx)

    # -- conveniences --------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self):
        backward(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    """Wrap array-like data as a leaf tensor in the current compute dtype."""
    return Tensor(np.asarray(data, dtype=_DTYPE), requires_grad=requires_grad)


def parameter(data) -> Tensor:
    """A leaf tensor that collects gradients."""
    return tensor(data, requires_grad=True)


def _wrap(x, like: np.ndarray | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else _DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _record(data: np.ndarray, parents: Sequence[tuple]) -> Tensor:
    if _GRAD_ENABLED:
        live = tuple((p, fn) for p, fn in parents if p.requires_grad or p._parents)
        if live:
            return Tensor(data, requires_grad=True, _parents=live)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, like=a.data)
    out = a.data + b.data
    return _record(out, [(a, lambda g: _unbroadcast(g, a.data.shape)),
                         (b, lambda g: _unbroadcast(g, b.data.shape))])


def sub(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, like=a.data)
    out = a.data - b.data
    return _record(out, [(a, lambda g: _unbroadcast(g, a.data.shape)),
                         (b, lambda g: _unbroadcast(-g, b.data.shape))])


def mul(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, like=a.data)
    out = a.data * b.data
    return _record(out, [(a, lambda g: _unbroadcast(g * b.data, a.data.shape)),
                         (b, lambda g: _unbroadcast(g * a.data, b.data.shape))])


def div(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, like=a.data)
    out = _checked(lambda x: x / b.data, a.data, "div")
    return _record(out, [(a, lambda g: _unbroadcast(g / b.data, a.data.shape)),
                         (b, lambda g: _unbroadcast(-g * a.data / (b.data * b.data),
                                                    b.data.shape))])


def neg(a) -> Tensor:
    a = _wrap(a)
    return _record(-a.data, [(a, lambda g: -g)])


def square(a) -> Tensor:
    a = _wrap(a)
    return _record(a.data * a.data, [(a, lambda g: g * (2.0 * a.data))])


def texp(a) -> Tensor:
    a = _wrap(a)
    out = _checked(np.exp, a.data, "exp")
    return _record(out, [(a, lambda g: g * out)])


def tlog(a) -> Tensor:
    a = _wrap(a)
    out = _checked(np.log, a.data, "log")
    return _record(out, [(a, lambda g: g / a.data)])


def tsqrt(a) -> Tensor:
    a = _wrap(a)
    out = _checked(np.sqrt, a.data, "sqrt")
    return _record(out, [(a, lambda g: g / (2.0 * out))])


def tabs(a) -> Tensor:
    # subgradient 0 at the kink
    a = _wrap(a)
    return _record(np.abs(a.data), [(a, lambda g: g * np.sign(a.data))])


def _sigmoid_raw(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    out = _sigmoid_raw(a.data)
    return _record(out, [(a, lambda g: g * out * (1.0 - out))])


def swish(a) -> Tensor:
    """x * sigmoid(x), the gate nonlinearity."""
    a = _wrap(a)
    s = _sigmoid_raw(a.data)
    out = a.data * s
    return _record(out, [(a, lambda g: g * (s + out * (1.0 - s)))])


def tanh(a) -> Tensor:
    a = _wrap(a)
    out = np.tanh(a.data)
    return _record(out, [(a, lambda g: g * (1.0 - out * out))])


def softplus(a) -> Tensor:
    a = _wrap(a)
    out = np.logaddexp(np.array(0.0, dtype=a.data.dtype), a.data)
    s = _sigmoid_raw(a.data)
    return _record(out, [(a, lambda g: g * s)])


# ---------------------------------------------------------------------------
# linear algebra / reductions
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Batched matrix product ``(..., m, k) @ (..., k, n)``."""
    a = _wrap(a)
    b = _wrap(b, like=a.data)
    out = a.data @ b.data

    def ga(g):
        return _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)

    def gb(g):
        return _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)

    return _record(out, [(a, ga), (b, gb)])


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def g_in(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.data.shape)

    return _record(np.asarray(out), [(a, g_in)])


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    if axis is None:
        n = a.data.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.data.shape[i] for i in axis]))
    else:
        n = a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(a, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Row-stochastic softmax; ``mask`` (bool, False = excluded) makes the
    excluded weights exactly zero, so masked positions carry no gradient."""
    a = _wrap(a)
    x = a.data
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    shift = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - shift)
    out = e / e.sum(axis=axis, keepdims=True)

    def g_in(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return out * (g - inner)

    return _record(out, [(a, g_in)])


# ---------------------------------------------------------------------------
# shape / gather
# ---------------------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    return _record(a.data.reshape(shape), [(a, lambda g: g.reshape(a.data.shape))])


def transpose(a, axes) -> Tensor:
    a = _wrap(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(np.transpose(a.data, axes), [(a, lambda g: np.transpose(g, inv))])


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = _wrap(a)
    return _record(np.swapaxes(a.data, ax1, ax2),
                   [(a, lambda g: np.swapaxes(g, ax1, ax2))])


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def make_slice(i):
        def g_in(g):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            return g[tuple(sl)]
        return g_in

    return _record(out, [(t, make_slice(i)) for i, t in enumerate(ts)])


def index(a, idx) -> Tensor:
    """Basic indexing (slices / ints); adjoint scatters back additively."""
    a = _wrap(a)
    out = a.data[idx]

    def g_in(g):
        full = np.zeros_like(a.data)
        full[idx] += g
        return full

    return _record(np.asarray(out), [(a, g_in)])


def permute_along(a, perm: np.ndarray, axis: int = -1) -> Tensor:
    """Gather by a permutation along ``axis`` (e.g. a sort order).

    ``perm`` must be a permutation per slice (as produced by ``argsort``);
    the adjoint is the gather by the inverse permutation, which is exact.
    """
    a = _wrap(a)
    perm = np.asarray(perm)
    out = np.take_along_axis(a.data, perm, axis=axis)
    inv = np.argsort(perm, axis=axis)
    return _record(out, [(a, lambda g: np.take_along_axis(g, inv, axis=axis))])


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    expanded = [reshape(t, t.data.shape[:axis] + (1,) + t.data.shape[axis:])
                for t in ts]
    return concat(expanded, axis=axis)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(out: Tensor) -> None:
    """Reverse-mode sweep from a scalar ``out``; assigns ``.grad`` on every
    tensor in the graph with ``requires_grad``."""
    if out.data.size != 1:
        raise ValueError("backward expects a scalar output")

    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(out, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p, _ in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    adjoint: dict[int, np.ndarray] = {
        id(out): np.ones_like(out.data)
    }
    for node in reversed(order):
        g = adjoint.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad and not node._parents:
            node.grad = g
        for p, vjp in node._parents:
            contrib = vjp(g)
            key = id(p)
            if key in adjoint:
                adjoint[key] = adjoint[key] + contrib
            else:
                adjoint[key] = contrib


# ---------------------------------------------------------------------------
# seeded random streams
# ---------------------------------------------------------------------------

def _stream_key(stream: str, seed: int) -> np.ndarray:
    digest = hashlib.sha256(f"{stream}:{seed}".encode()).digest()
    return np.frombuffer(digest[:16], dtype=np.uint64)


def stream_generator(stream: str, seed: int) -> np.random.Generator:
    """Counter-based (Philox) generator keyed by ``(stream, seed)``."""
    return np.random.Generator(np.random.Philox(key=_stream_key(stream, seed)))


def seeded_normal(shape, stream: str, seed: int) -> np.ndarray:
    """Standard-normal draw, reproducible per ``(stream, seed)``."""
    gen = stream_generator(stream, seed)
    return gen.standard_normal(shape, dtype=np.float64).astype(_DTYPE)


def seeded_uniform(shape, stream: str, seed: int, low: float = 0.0,
                   high: float = 1.0) -> np.ndarray:
    gen = stream_generator(stream, seed)
    return (low + (high - low) * gen.random(shape)).astype(_DTYPE)


def seeded_permutation(n: int, stream: str, seed: int) -> np.ndarray:
    return stream_generator(stream, seed).permutation(n)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Adaptive-moment optimizer with global-norm gradient clipping."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 clip_norm: float = 1.0):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        if not grads:
            return
        for g in grads.values():
            if not np.isfinite(g).all():
                raise NumericError("non-finite gradient in optimizer step")
        if self.clip_norm is not None:
            total = np.sqrt(sum(float((g.astype(np.float64) ** 2).sum())
                                for g in grads.values()))
            if total > self.clip_norm:
                scale = self.clip_norm / total
                grads = {k: g * scale for k, g in grads.items()}
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            p = self.params[k]
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            mhat = self.m[k] / b1t
            vhat = self.v[k] / b2t
            p.data = p.data - (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# finite-difference verification harness
# ---------------------------------------------------------------------------

def finite_diff_grad(f: Callable[[], Tensor], param: Tensor,
                     step: float = 1e-4) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. every element of
    ``param`` (mutates ``param.data`` in place, restoring it)."""
    base = param.data
    grad = np.zeros_like(base, dtype=np.float64)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = float(f().data)
        flat[i] = orig - step
        lo = float(f().data)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def gradient_check(f: Callable[[], Tensor], params: dict[str, Tensor],
                   step: float = 1e-4, floor: float = 1e-4) -> dict[str, float]:
    """Compare reverse-mode and central-difference gradients.

    Returns per-parameter max relative error
    ``|ad - fd| / max(|ad|, |fd|, floor)``; the floor keeps near-zero
    gradients from inflating the ratio with finite-difference noise.
    Run under ``precision("float64")``.
    """
    out = f()
    for p in params.values():
        p.grad = None
    backward(out)
    analytic = {k: (np.zeros_like(p.data, dtype=np.float64) if p.grad is None
                    else p.grad.astype(np.float64))
                for k, p in params.items()}
    errors = {}
    for k, p in params.items():
        fd = finite_diff_grad(f, p, step=step)
        denom = np.maximum(np.maximum(np.abs(analytic[k]), np.abs(fd)), floor)
        errors[k] = float(np.max(np.abs(analytic[k] - fd) / denom))
    return errors
