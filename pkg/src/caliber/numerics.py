"""Dense float64 arithmetic, seeded randomness and a small reverse-mode tape.

Arrays are plain ``numpy.ndarray`` (float64, C order). The tape records
array-level primitives (matmul, broadcasting arithmetic, elementwise
nonlinearities, softmax, reductions, reshapes) and replays them backwards
to produce adjoints for every registered parameter.
"""

from __future__ import annotations

import hashlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DomainError, DimensionError

DTYPE = np.float64


# ----------------------------------------------------------------------------
# Scalar / vector helpers
# ----------------------------------------------------------------------------


def softmax_row(v) -> np.ndarray:
    """Numerically stable softmax of a 1-D vector."""
    v = np.asarray(v, dtype=DTYPE)
    if v.ndim != 1 or v.size == 0:
        raise DomainError("softmax_row needs a nonempty vector")
    if not np.all(np.isfinite(v)):
        raise DomainError("softmax_row got a non-finite entry")
    e = np.exp(v - v.max())
    return e / e.sum()


def softplus(x: float) -> float:
    if not math.isfinite(x):
        raise DomainError(f"softplus of non-finite value {x!r}")
    if x > 30.0:
        return x + math.log1p(math.exp(-x))
    return math.log1p(math.exp(x))


def _softplus_array(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _sigmoid_array(x: np.ndarray) -> np.ndarray:
    return np.exp(-_softplus_array(-x))


# ----------------------------------------------------------------------------
# Randomness
# ----------------------------------------------------------------------------


def derive_seed(seed: int, *purpose) -> int:
    """Sub-seed for ``purpose``: first 8 bytes (little-endian) of
    SHA-256 over ``"seed:purpose[0]:purpose[1]:..."``."""
    text = ":".join([str(int(seed))] + [str(p) for p in purpose])
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")


class Rng:
    """Seeded stream backed by the Philox-4x64 counter-based generator.

    Standard normals use the Box-Muller transform, cosine branch only:
    ``z = sqrt(-2 ln(1 - u1)) * cos(2 pi u2)`` with ``u1, u2`` consecutive
    uniform blocks of the requested size. Streams are therefore fully
    determined by the seed and the sequence of draw sizes.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))
        self.normals_drawn = 0

    def child(self, *purpose) -> "Rng":
        return Rng(derive_seed(self.seed, *purpose))

    def uniform(self, size=None):
        return self._gen.random(size)

    def normal(self, size=()) -> np.ndarray:
        shape = (size,) if isinstance(size, (int, np.integer)) else tuple(size)
        n = int(np.prod(shape, dtype=np.int64))
        u = self._gen.random((2, n))
        z = np.sqrt(-2.0 * np.log1p(-u[0])) * np.cos(2.0 * np.pi * u[1])
        self.normals_drawn += n
        return z.reshape(shape)

    def integers(self, low: int, high: int, size=None):
        """Integers in ``[low, high]`` inclusive."""
        return self._gen.integers(low, high, size=size, endpoint=True)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


# ----------------------------------------------------------------------------
# Reverse-mode tape
# ----------------------------------------------------------------------------


class Var:
    """A value on (or off) a tape. ``requires_grad`` marks tape-tracked nodes."""

    __slots__ = ("value", "tape", "uid", "requires_grad", "name")
    __array_priority__ = 100.0

    def __init__(self, value, tape=None, requires_grad=False, name=None):
        self.value = value
        self.tape = tape
        self.requires_grad = requires_grad
        self.name = name
        self.uid = tape._next_uid() if tape is not None else -1

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Var{tag}(shape={self.value.shape}, grad={self.requires_grad})"

    __add__ = lambda a, b: add(a, b)
    __radd__ = lambda a, b: add(b, a)
    __sub__ = lambda a, b: sub(a, b)
    __rsub__ = lambda a, b: sub(b, a)
    __mul__ = lambda a, b: mul(a, b)
    __rmul__ = lambda a, b: mul(b, a)
    __truediv__ = lambda a, b: div(a, b)
    __matmul__ = lambda a, b: matmul(a, b)
    __rmatmul__ = lambda a, b: matmul(b, a)
    __neg__ = lambda a: mul(a, -1.0)
    __getitem__ = lambda a, idx: getitem(a, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return vsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return vmean(self, axis, keepdims)

    def swapaxes(self, a1, a2):
        return swapaxes(self, a1, a2)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


class GradTape:
    """Records primitive ops in execution order; ``backward`` replays them.

    Parameters enter through :meth:`param` and are the only leaves that
    collect adjoints. Anything else (frozen weights, data, noise) is a
    constant and never appears in the registry.
    """

    def __init__(self):
        self._ops: list[tuple[Var, tuple, Callable]] = []
        self.params: dict[str, Var] = {}
        self._uid = 0

    def _next_uid(self) -> int:
        self._uid += 1
        return self._uid

    def param(self, name: str, value) -> Var:
        if name in self.params:
            raise KeyError(f"parameter {name!r} registered twice")
        v = Var(np.asarray(value, dtype=DTYPE), self, True, name)
        self.params[name] = v
        return v

    def bind(self, params: dict) -> dict[str, Var]:
        return {k: self.param(k, v) for k, v in params.items()}

    def record(self, out: Var, parents: tuple, backward: Callable) -> None:
        self._ops.append((out, parents, backward))

    def __len__(self):
        return len(self._ops)

    def backward(self, loss: Var) -> dict[str, np.ndarray]:
        if loss.value.size != 1:
            raise DimensionError("backward needs a scalar loss")
        adj: dict[int, np.ndarray] = {loss.uid: np.ones_like(loss.value)}
        for out, parents, fn in reversed(self._ops):
            g = adj.pop(out.uid, None)
            if g is None:
                continue
            pgrads = fn(g)
            for p, pg in zip(parents, pgrads):
                if pg is None or not isinstance(p, Var) or not p.requires_grad:
                    continue
                if p.uid in adj:
                    adj[p.uid] = adj[p.uid] + pg
                else:
                    adj[p.uid] = pg
        return {
            name: adj[v.uid] if v.uid in adj else np.zeros_like(v.value)
            for name, v in self.params.items()
        }


def const(value) -> Var:
    return Var(np.asarray(value, dtype=DTYPE))


def _val(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=DTYPE)


def _tracked(*xs):
    for x in xs:
        if isinstance(x, Var) and x.requires_grad:
            return x.tape
    return None


def _emit(value, parents, backward) -> Var:
    tape = _tracked(*parents)
    if tape is None:
        return Var(value)
    out = Var(value, tape, True)
    tape.record(out, parents, backward)
    return out


def unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Var:
    av, bv = _val(a), _val(b)
    return _emit(av + bv, (a, b), lambda g: (unbroadcast(g, av.shape), unbroadcast(g, bv.shape)))


def sub(a, b) -> Var:
    av, bv = _val(a), _val(b)
    return _emit(av - bv, (a, b), lambda g: (unbroadcast(g, av.shape), unbroadcast(-g, bv.shape)))


def mul(a, b) -> Var:
    av, bv = _val(a), _val(b)
    return _emit(
        av * bv,
        (a, b),
        lambda g: (unbroadcast(g * bv, av.shape), unbroadcast(g * av, bv.shape)),
    )


def div(a, b) -> Var:
    av, bv = _val(a), _val(b)
    out = av / bv
    return _emit(
        out,
        (a, b),
        lambda g: (unbroadcast(g / bv, av.shape), unbroadcast(-g * out / bv, bv.shape)),
    )


def matmul(a, b) -> Var:
    """``numpy.matmul`` semantics for operands with ndim >= 2."""
    av, bv = _val(a), _val(b)
    if av.ndim < 2 or bv.ndim < 2:
        raise DimensionError("matmul operands must be at least 2-D")
    if av.shape[-1] != bv.shape[-2]:
        raise DimensionError(f"matmul shape mismatch {av.shape} @ {bv.shape}")

    def back(g):
        ga = gb = None
        if isinstance(a, Var) and a.requires_grad:
            ga = unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)
        if isinstance(b, Var) and b.requires_grad:
            gb = unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)
        return ga, gb

    return _emit(av @ bv, (a, b), back)


def square(a) -> Var:
    av = _val(a)
    return _emit(av * av, (a,), lambda g: (2.0 * g * av,))


def tanh(a) -> Var:
    out = np.tanh(_val(a))
    return _emit(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Var:
    av = _val(a)
    pos = av > 0
    return _emit(np.where(pos, av, 0.0), (a,), lambda g: (g * pos,))


def exp(a) -> Var:
    out = np.exp(_val(a))
    return _emit(out, (a,), lambda g: (g * out,))


def log(a) -> Var:
    av = _val(a)
    if np.any(av <= 0):
        raise DomainError("log of nonpositive value")
    return _emit(np.log(av), (a,), lambda g: (g / av,))


def vsoftplus(a) -> Var:
    av = _val(a)
    return _emit(_softplus_array(av), (a,), lambda g: (g * _sigmoid_array(av),))


def vsum(a, axis=None, keepdims=False) -> Var:
    av = _val(a)
    out = np.sum(av, axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape).copy(),)

    return _emit(np.asarray(out), (a,), back)


def vmean(a, axis=None, keepdims=False) -> Var:
    av = _val(a)
    n = av.size if axis is None else int(np.prod([av.shape[i] for i in np.atleast_1d(axis)]))
    return mul(vsum(a, axis, keepdims), 1.0 / n)


def reshape(a, shape) -> Var:
    av = _val(a)
    return _emit(av.reshape(shape), (a,), lambda g: (g.reshape(av.shape),))


def swapaxes(a, a1, a2) -> Var:
    return _emit(np.swapaxes(_val(a), a1, a2), (a,), lambda g: (np.swapaxes(g, a1, a2),))


def transpose(a, axes) -> Var:
    inv = np.argsort(axes)
    return _emit(np.transpose(_val(a), axes), (a,), lambda g: (np.transpose(g, inv),))


def concat(xs: Sequence, axis=-1) -> Var:
    vals = [_val(x) for x in xs]
    sizes = [v.shape[axis] for v in vals]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _emit(np.concatenate(vals, axis=axis), tuple(xs), back)


def getitem(a, idx) -> Var:
    av = _val(a)

    fancy = any(isinstance(i, (np.ndarray, list)) for i in (idx if isinstance(idx, tuple) else (idx,)))

    def back(g):
        full = np.zeros_like(av)
        if fancy:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _emit(av[idx], (a,), back)


def softmax(a, axis=-1, mask=None) -> Var:
    """Softmax along ``axis``; ``mask`` (bool, broadcastable) marks valid
    positions, invalid ones get exactly zero weight."""
    av = _val(a)
    if mask is not None:
        av = np.where(mask, av, -np.inf)
    m = np.max(av, axis=axis, keepdims=True)
    e = np.exp(av - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit(out, (a,), back)


def log_softmax(a, axis=-1) -> Var:
    av = _val(a)
    m = np.max(av, axis=axis, keepdims=True)
    lse = m + np.log(np.exp(av - m).sum(axis=axis, keepdims=True))
    out = av - lse
    p = np.exp(out)
    return _emit(out, (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def layer_norm(a, eps=1e-5) -> Var:
    """Affine-free normalisation over the last axis."""
    av = _val(a)
    mu = av.mean(axis=-1, keepdims=True)
    xc = av - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    y = xc * inv

    def back(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _emit(y, (a,), back)


# ----------------------------------------------------------------------------
# Finite-difference oracle
# ----------------------------------------------------------------------------


def finite_diff_gradient(
    loss_fn: Callable[[dict], float],
    params: dict,
    h: float = 1e-5,
    names: Iterable[str] | None = None,
) -> dict[str, np.ndarray]:
    """Central differences ``(f(p+h) - f(p-h)) / 2h`` for every scalar entry.

    ``loss_fn`` receives a dict of arrays and must be deterministic.
    ``params`` is not modified.
    """
    if h <= 0:
        raise DomainError("finite-difference step must be positive")
    work = {k: np.array(v, dtype=DTYPE, copy=True) for k, v in params.items()}
    out = {}
    for name in names if names is not None else list(work):
        arr = work[name]
        grad = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(loss_fn(work))
            flat[i] = orig - h
            fm = float(loss_fn(work))
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        out[name] = grad
    return out


def max_relative_error(analytic: dict, numeric: dict, floor: float = 1e-8) -> dict[str, float]:
    """Per-parameter worst ``|a - n| / max(|a|, floor)`` with ``a`` the analytic adjoint."""
    res = {}
    for k, a in analytic.items():
        n = numeric[k]
        denom = np.maximum(np.abs(a), floor)
        res[k] = float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
    return res
