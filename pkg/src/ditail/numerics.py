"""Deterministic tensor kernels, a counter-based RNG and a small reverse-mode tape.

Tensors are plain ``numpy.ndarray`` values.  float32 is the working precision for
inference and training; passing float64 arrays everywhere switches the same code
into the verification mode used by the gradient and inversion checks.

Two interchangeable "ops" backends expose the primitive set:

* :data:`EVAL` evaluates kernels on arrays and records nothing.
* :class:`Tape` evaluates the very same kernels on :class:`Var` nodes and records
  a vector-Jacobian product per node, so ``backward`` can replay it.

Model code is written once against the backend interface, which keeps the
recorded forward bit-identical to the inference forward.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericsError(ArithmeticError):
    """A public operation produced NaN or Inf."""


class TapeError(RuntimeError):
    """The tape was used incorrectly (e.g. a loss that was never recorded)."""


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericsError(f"non-finite values in {what}")
    return x


# --------------------------------------------------------------------------
# Kernels (pure array functions)
# --------------------------------------------------------------------------

def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """``x @ w + b`` over the last axis of ``x``."""
    if x.ndim < 1 or w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: cannot contract {x.shape} with {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise DimensionError(f"linear: bias {b.shape} does not match {w.shape}")
    if x.ndim == 2:
        out = x @ w
    else:
        out = (x.reshape(-1, w.shape[0]) @ w).reshape(*x.shape[:-1], w.shape[1])
    if b is not None:
        out = out + b
    return out


def silu(x: np.ndarray) -> np.ndarray:
    return x * _sigmoid(x)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form cannot overflow
    return 0.5 + 0.5 * np.tanh(0.5 * x)


def layer_norm(x: np.ndarray, gain: np.ndarray, shift: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Normalise each token over channels, then apply a per-channel scale-shift."""
    if gain.shape != (x.shape[-1],) or shift.shape != (x.shape[-1],):
        raise DimensionError(f"layer_norm: params {gain.shape}/{shift.shape} vs {x.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + eps) * gain + shift


def softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def scaled_dot_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Single-head attention over the last two axes; returns ``(out, attn)``."""
    if q.shape != k.shape or q.shape != v.shape:
        raise DimensionError(f"attention: q{q.shape} k{k.shape} v{v.shape} must match")
    d = q.shape[-1]
    if d == 0:
        raise DimensionError("attention: zero feature width")
    logits = (q @ np.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(d))
    attn = softmax(logits)
    return attn @ v, attn


def mean_square(x: np.ndarray, target: np.ndarray) -> np.ndarray:
    if x.shape != target.shape:
        raise DimensionError(f"mean_square: {x.shape} vs {target.shape}")
    d = x - target
    return np.mean(d * d)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --------------------------------------------------------------------------
# Backends
# --------------------------------------------------------------------------

class Eval:
    """Array backend: same interface as :class:`Tape`, nothing recorded."""

    def linear(self, x, w, b=None):
        return linear(x, w, b)

    def silu(self, x):
        return silu(x)

    def layer_norm(self, x, gain, shift):
        return layer_norm(x, gain, shift)

    def attention(self, q, k, v):
        return scaled_dot_attention(q, k, v)[0]

    def add(self, a, b):
        return a + b

    def mul(self, a, b):
        return a * b

    def reshape(self, x, shape):
        return x.reshape(shape)

    def transpose(self, x, axes):
        return x.transpose(axes)

    def mean_square(self, x, target):
        return mean_square(x, target)

    def value(self, x):
        return x


EVAL = Eval()


class Var:
    __slots__ = ("value", "index", "trainable", "name")

    def __init__(self, value: np.ndarray, index: int, trainable: bool = False, name: str = ""):
        self.value = value
        self.index = index
        self.trainable = trainable
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var({self.name or self.index}, shape={self.value.shape})"


class Tape(Eval):
    """Records primitive applications in execution order.

    Each entry keeps the parents and a closure mapping the output cotangent to
    parent cotangents.  Recording order is a topological order, so ``backward``
    simply walks the list in reverse.
    """

    def __init__(self):
        self.nodes: list[Var] = []
        self._parents: list[tuple[Var, ...]] = []
        self._vjp: list[Callable[[np.ndarray], Sequence[np.ndarray | None]] | None] = []

    def leaf(self, value, trainable: bool = True, name: str = "") -> Var:
        v = Var(np.asarray(value), len(self.nodes), trainable, name)
        self.nodes.append(v)
        self._parents.append(())
        self._vjp.append(None)
        return v

    def _lift(self, x) -> Var:
        if isinstance(x, Var):
            return x
        return self.leaf(x, trainable=False)

    def _record(self, value, parents, vjp) -> Var:
        v = Var(value, len(self.nodes))
        self.nodes.append(v)
        self._parents.append(tuple(parents))
        self._vjp.append(vjp)
        return v

    # primitives ----------------------------------------------------------

    def linear(self, x, w, b=None):
        x, w = self._lift(x), self._lift(w)
        parents = [x, w]
        if b is not None:
            b = self._lift(b)
            parents.append(b)
        out = linear(x.value, w.value, None if b is None else b.value)
        xv, wv = x.value, w.value

        def vjp(g):
            g2 = g.reshape(-1, g.shape[-1])
            gx = (g2 @ wv.T).reshape(xv.shape)
            gw = xv.reshape(-1, xv.shape[-1]).T @ g2
            if b is None:
                return gx, gw
            return gx, gw, g2.sum(axis=0)

        return self._record(out, parents, vjp)

    def silu(self, x):
        x = self._lift(x)
        xv = x.value
        s = _sigmoid(xv)

        def vjp(g):
            return (g * (s * (1.0 + xv * (1.0 - s))),)

        return self._record(xv * s, [x], vjp)

    def layer_norm(self, x, gain, shift):
        x, gain, shift = self._lift(x), self._lift(gain), self._lift(shift)
        xv = x.value
        out = layer_norm(xv, gain.value, shift.value)
        mu = xv.mean(axis=-1, keepdims=True)
        xc = xv - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + 1e-5)
        xhat = xc * inv
        n = xv.shape[-1]
        gv = gain.value

        def vjp(g):
            gh = g * gv
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
            gg = (g * xhat).reshape(-1, n).sum(axis=0)
            gs = g.reshape(-1, n).sum(axis=0)
            return gx, gg, gs

        return self._record(out, [x, gain, shift], vjp)

    def attention(self, q, k, v):
        q, k, v = self._lift(q), self._lift(k), self._lift(v)
        out, attn = scaled_dot_attention(q.value, k.value, v.value)
        scale = 1.0 / math.sqrt(q.value.shape[-1])
        qv, kv, vv = q.value, k.value, v.value

        def vjp(g):
            gv = np.swapaxes(attn, -1, -2) @ g
            ga = g @ np.swapaxes(vv, -1, -2)
            gl = attn * (ga - (ga * attn).sum(axis=-1, keepdims=True)) * scale
            gq = gl @ kv
            gk = np.swapaxes(gl, -1, -2) @ qv
            return gq, gk, gv

        return self._record(out, [q, k, v], vjp)

    def add(self, a, b):
        a, b = self._lift(a), self._lift(b)
        sa, sb = a.value.shape, b.value.shape
        return self._record(a.value + b.value, [a, b],
                            lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))

    def mul(self, a, b):
        a, b = self._lift(a), self._lift(b)
        av, bv = a.value, b.value
        return self._record(av * bv, [a, b],
                            lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))

    def reshape(self, x, shape):
        x = self._lift(x)
        old = x.value.shape
        return self._record(x.value.reshape(shape), [x], lambda g: (g.reshape(old),))

    def transpose(self, x, axes):
        x = self._lift(x)
        inv = np.argsort(axes)
        return self._record(x.value.transpose(axes), [x], lambda g: (g.transpose(inv),))

    def mean_square(self, x, target):
        x, target = self._lift(x), self._lift(target)
        d = x.value - target.value
        n = d.size

        def vjp(g):
            gx = g * (2.0 / n) * d
            return gx, -gx

        return self._record(mean_square(x.value, target.value), [x, target], vjp)

    def value(self, x):
        return x.value if isinstance(x, Var) else x


def backward(tape: Tape, loss: Var) -> dict[int, np.ndarray]:
    """Gradients of the scalar ``loss`` for every trainable leaf, keyed by node index.

    Leaves the loss does not depend on receive zeros.
    """
    if not isinstance(loss, Var) or loss.index >= len(tape.nodes) or tape.nodes[loss.index] is not loss:
        raise TapeError("loss was not recorded on this tape")
    if np.ndim(loss.value) != 0:
        raise TapeError(f"loss must be scalar, got shape {np.shape(loss.value)}")
    grads: list[np.ndarray | None] = [None] * len(tape.nodes)
    grads[loss.index] = np.ones_like(loss.value)
    for i in range(loss.index, -1, -1):
        g = grads[i]
        vjp = tape._vjp[i]
        if g is None or vjp is None:
            continue
        for parent, pg in zip(tape._parents[i], vjp(g)):
            if pg is None:
                continue
            j = parent.index
            grads[j] = pg if grads[j] is None else grads[j] + pg
    out = {}
    for node in tape.nodes:
        if node.trainable:
            g = grads[node.index]
            out[node.index] = np.zeros_like(node.value) if g is None else g
    return out


# --------------------------------------------------------------------------
# RNG
# --------------------------------------------------------------------------

_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    """SplitMix64 finaliser applied elementwise to uint64 counters."""
    z = x.copy()
    z ^= z >> np.uint64(30)
    z *= _MIX1
    z ^= z >> np.uint64(27)
    z *= _MIX2
    z ^= z >> np.uint64(31)
    return z


def _mix64(z: int) -> int:
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9 & 0xFFFFFFFFFFFFFFFF
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB & 0xFFFFFFFFFFFFFFFF
    return z ^ (z >> 31)


def derive_seed(*keys: int | str) -> int:
    """Fold integers/strings into one 64-bit seed (order-sensitive)."""
    h = 0x243F6A8885A308D3
    for key in keys:
        vals = list(key.encode("utf-8")) + [len(key)] if isinstance(key, str) else [int(key)]
        for v in vals:
            h = _mix64((h ^ (v & 0xFFFFFFFFFFFFFFFF)) + _GOLDEN & 0xFFFFFFFFFFFFFFFF)
    return h


class Rng:
    """Counter-based SplitMix64 stream.

    The n-th raw draw is ``splitmix64(seed + n * 0x9E3779B97F4A7C15 mod 2**64)``.
    Uniforms take the top 53 bits, mapped to (0, 1].  Normals use Box-Muller on
    consecutive uniform pairs: ``sqrt(-2 ln u1) * cos(2 pi u2)`` then ``... sin``.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.counter = 0

    def raw(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            x = np.uint64(self.seed) + idx * np.uint64(_GOLDEN)
            return _splitmix64(x)

    def uniform(self, shape=()) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        bits = self.raw(n) >> np.uint64(11)
        u = (bits.astype(np.float64) + 1.0) * (1.0 / 9007199254740992.0)
        return u.reshape(shape)

    def normal(self, shape=(), dtype=np.float32) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        m = (n + 1) // 2
        u = self.uniform((2 * m,))
        r = np.sqrt(-2.0 * np.log(u[0::2]))
        theta = (2.0 * math.pi) * u[1::2]
        z = np.empty(2 * m)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return z[:n].reshape(shape).astype(dtype)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Uniform integers in ``[low, high)``."""
        n = int(np.prod(shape, dtype=np.int64))
        bits = (self.raw(n) >> np.uint64(11)).astype(np.float64)
        k = np.floor(bits * ((high - low) / 9007199254740992.0)).astype(np.int64)
        return (low + k).reshape(shape)

    def choice(self, seq):
        return seq[int(self.integers(0, len(seq)))]
