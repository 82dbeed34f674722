"""Dense float64 tensors with reverse-mode automatic differentiation.

Every value flowing through the encoder, decoder, and losses is a
:class:`Tensor` holding a contiguous float64 numpy array.  Operations
record a dynamic graph; ``backward()`` on a scalar loss accumulates
(summed) gradients into every reachable tensor with ``requires_grad``.
All math is 64-bit; 32-bit storage exists only in the checkpoint format.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf, expit


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class MaskError(ValueError):
    """A validity mask leaves no valid entries where some are required."""


class ConfigError(ValueError):
    """A hyperparameter is outside its legal range."""


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- graph ------------------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode pass from a scalar; gradients accumulate by sum."""
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {self.data.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -other if isinstance(other, Tensor) else -np.asarray(other))

    def __rsub__(self, other):
        return add(-self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, *axes):
        return transpose(self, axes[0] if len(axes) == 1 and isinstance(axes[0], (tuple, list)) else axes)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.data.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)


class Parameter(Tensor):
    """A trainable leaf tensor."""

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


def backward(loss: Tensor) -> None:
    loss.backward()


# -- node plumbing ----------------------------------------------------------


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g.copy() if isinstance(g, np.ndarray) and g.base is not None else np.asarray(g)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- arithmetic --------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        data = a.data + b.data

        def bw(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(g, a.data.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(g, b.data.shape))

        return _node(data, (a, b), bw)
    const = b
    data = a.data + const

    def bw_const(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))

    return _node(data, (a,), bw_const)


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        data = a.data * b.data

        def bw(g):
            if a.requires_grad:
                _accum(a, _unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                _accum(b, _unbroadcast(g * a.data, b.data.shape))

        return _node(data, (a, b), bw)
    const = b
    data = a.data * const

    def bw_const(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * const, a.data.shape))

    return _node(data, (a,), bw_const)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``(..,m,k) @ (..,k,n)``; batch dims broadcast."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {ad.shape} @ {bd.shape}")
    data = ad @ bd

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ bd.swapaxes(-1, -2), ad.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(ad.swapaxes(-1, -2) @ g, bd.shape))

    return _node(data, (a, b), bw)


# -- shape ops ----------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    data = a.data.reshape(shape)

    def bw(g):
        if a.requires_grad:
            _accum(a, g.reshape(old))

    return _node(data, (a,), bw)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    data = np.transpose(a.data, axes)

    def bw(g):
        if a.requires_grad:
            _accum(a, np.transpose(g, inv))

    return _node(data, (a,), bw)


def _has_advanced_index(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return any(isinstance(p, (np.ndarray, list)) for p in parts)


def getitem(a: Tensor, key) -> Tensor:
    data = a.data[key]
    if data.base is not None:
        data = data.copy()
    advanced = _has_advanced_index(key)

    def bw(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            if advanced:
                np.add.at(buf, key, g)
            else:
                buf[key] += g
            _accum(a, buf)

    return _node(data, (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    datas = [t.data for t in tensors]
    data = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        pieces = np.split(g, splits, axis=axis)
        for t, piece in zip(tensors, pieces):
            if t.requires_grad:
                _accum(t, piece)

    return _node(data, tuple(tensors), bw)


def pad(a: Tensor, pad_width) -> Tensor:
    """Zero padding; ``pad_width`` follows numpy's per-axis convention."""
    data = np.pad(a.data, pad_width)
    region = tuple(slice(lo, lo + s) for (lo, _), s in zip(pad_width, a.data.shape))

    def bw(g):
        if a.requires_grad:
            _accum(a, g[region])

    return _node(data, (a,), bw)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if not a.requires_grad:
            return
        gg = g
        if not keepdims and axis is not None:
            gg = np.expand_dims(gg, axis)
        _accum(a, np.broadcast_to(gg, a.data.shape))

    return _node(data, (a,), bw)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.data.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


# -- normalization and attention helpers --------------------------------------


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    """Zero-mean unit-variance normalization over the last axis, then affine."""
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gain.data.shape}/{bias.data.shape} do not match feature dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data

    def bw(g):
        if bias.requires_grad:
            _accum(bias, g.reshape(-1, d).sum(axis=0))
        if gain.requires_grad:
            _accum(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gg = g * gain.data
            m1 = gg.mean(axis=-1, keepdims=True)
            m2 = (gg * xhat).mean(axis=-1, keepdims=True)
            _accum(x, (gg - m1 - xhat * m2) * inv)

    return _node(data, (x, gain, bias), bw)


def softmax(x: Tensor, mask: Optional[np.ndarray] = None, axis: int = -1) -> Tensor:
    """Max-stabilized softmax; ``mask`` entries that are False become exact 0."""
    xd = x.data
    if mask is not None:
        m = np.broadcast_to(mask, xd.shape)
        if not m.any(axis=axis).all():
            raise MaskError("softmax row with no valid entries")
        xd = np.where(m, xd, -np.inf)
    z = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        if x.requires_grad:
            dot = (g * s).sum(axis=axis, keepdims=True)
            _accum(x, (g - dot) * s)

    return _node(s, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    data = z - lse

    def bw(g):
        if x.requires_grad:
            _accum(x, g - np.exp(data) * g.sum(axis=axis, keepdims=True))

    return _node(data, (x,), bw)


# -- element-wise activations --------------------------------------------------


def relu(x: Tensor) -> Tensor:
    data = np.maximum(x.data, 0.0)

    def bw(g):
        if x.requires_grad:
            _accum(x, g * (x.data > 0))

    return _node(data, (x,), bw)


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)

    def bw(g):
        if x.requires_grad:
            _accum(x, g * s * (1.0 - s))

    return _node(s, (x,), bw)


def swish(x: Tensor) -> Tensor:
    s = expit(x.data)
    data = x.data * s

    def bw(g):
        if x.requires_grad:
            _accum(x, g * (s + x.data * s * (1.0 - s)))

    return _node(data, (x,), bw)


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-CDF form: x * Phi(x)."""
    phi = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    data = x.data * phi

    def bw(g):
        if x.requires_grad:
            pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
            _accum(x, g * (phi + x.data * pdf))

    return _node(data, (x,), bw)


# -- convolutions --------------------------------------------------------------


def depthwise_conv1d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Per-channel 1-D convolution over the time axis with same zero padding.

    ``x`` is ``(..., T, c)``, ``kernel`` is ``(c, k)`` with odd ``k``,
    ``bias`` is ``(c,)``.  Channel c of the output depends only on channel c
    of the input.  Accumulation runs tap by tap so the arithmetic order per
    element is fixed, which keeps the op bitwise equivariant under channel
    permutation.
    """
    c, k = kernel.data.shape
    if k % 2 == 0:
        raise ConfigError(f"depthwise_conv1d kernel width must be odd, got {k}")
    if x.data.shape[-1] != c:
        raise ShapeError(f"depthwise_conv1d channels disagree: input {x.data.shape} vs kernel {kernel.data.shape}")
    t = x.data.shape[-2]
    p = (k - 1) // 2
    widths = [(0, 0)] * (x.data.ndim - 2) + [(p, p), (0, 0)]
    xp = np.pad(x.data, widths)
    data = np.broadcast_to(bias.data, x.data.shape).copy()
    for j in range(k):
        data += xp[..., j : j + t, :] * kernel.data[:, j]

    def bw(g):
        if bias.requires_grad:
            _accum(bias, g.reshape(-1, c).sum(axis=0))
        if kernel.requires_grad:
            gk = np.empty_like(kernel.data)
            lead = tuple(range(g.ndim - 1))
            for j in range(k):
                gk[:, j] = (xp[..., j : j + t, :] * g).sum(axis=lead)
            _accum(kernel, gk)
        if x.requires_grad:
            gp = np.pad(g, widths)
            gx = np.zeros_like(x.data)
            for j in range(k):
                gx += gp[..., j : j + t, :] * kernel.data[:, k - 1 - j]
            _accum(x, gx)

    return _node(data, (x, kernel, bias), bw)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 2) -> Tensor:
    """Valid 2-D convolution, ``x`` ``(..., c_in, h, w)``, kernel ``(c_out, c_in, kh, kw)``."""
    co, ci, kh, kw = kernel.data.shape
    if x.data.shape[-3] != ci:
        raise ShapeError(f"conv2d channels disagree: input {x.data.shape} vs kernel {kernel.data.shape}")
    h, w = x.data.shape[-2:]
    if h < kh or w < kw:
        raise ShapeError(f"conv2d input {x.data.shape} smaller than kernel {kernel.data.shape}")
    lead = x.data.shape[:-3]
    xb = x.data.reshape((-1, ci, h, w))
    win = sliding_window_view(xb, (kh, kw), axis=(-2, -1))  # (n, ci, hf, wf, kh, kw)
    win = win[:, :, ::stride, ::stride]
    data = np.einsum("ncijuv,ocuv->noij", win, kernel.data) + bias.data[:, None, None]
    ho, wo = data.shape[-2:]
    data = data.reshape(lead + (co, ho, wo))

    def bw(g):
        gb = g.reshape((-1, co, ho, wo))
        if bias.requires_grad:
            _accum(bias, gb.sum(axis=(0, 2, 3)))
        if kernel.requires_grad:
            _accum(kernel, np.einsum("ncijuv,noij->ocuv", win, gb))
        if x.requires_grad:
            gx = np.zeros_like(xb)
            for u in range(kh):
                for v in range(kw):
                    gx[:, :, u : u + stride * (ho - 1) + 1 : stride, v : v + stride * (wo - 1) + 1 : stride] += np.einsum(
                        "noij,oc->ncij", gb, kernel.data[:, :, u, v]
                    )
            _accum(x, gx.reshape(x.data.shape))

    return _node(data, (x, kernel, bias), bw)


# -- stochastic / masked reductions --------------------------------------------


def dropout(x: Tensor, rate: float, train: bool, rng: Optional["Rng"] = None) -> Tensor:
    """Inverted dropout: eval mode is the identity, train scales survivors."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ConfigError("train-mode dropout needs an Rng")
    keep = (rng.uniform(size=x.data.shape) >= rate) / (1.0 - rate)
    data = x.data * keep

    def bw(g):
        if x.requires_grad:
            _accum(x, g * keep)

    return _node(data, (x,), bw)


def reduce_mean_time(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over the time axis restricted to mask-valid positions.

    ``x`` is ``(..., T, d)`` and ``mask`` a boolean ``(..., T)``.
    """
    m = np.asarray(mask, dtype=bool)
    counts = m.sum(axis=-1)
    if np.any(counts == 0):
        raise MaskError("reduce_mean_time over a fully masked sequence")
    weights = m / counts[..., None]  # (..., T)
    data = np.einsum("...td,...t->...d", x.data, weights)

    def bw(g):
        if x.requires_grad:
            _accum(x, g[..., None, :] * weights[..., :, None])

    return _node(data, (x,), bw)


# -- randomness ----------------------------------------------------------------


class Rng:
    """Seeded PCG64 stream; same seed yields the same draws on any platform."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def normal(self, mean: float = 0.0, std: float = 1.0, size=None) -> np.ndarray:
        return self._gen.normal(mean, std, size)

    def integers(self, low: int, high: int, size=None):
        """Draws from the half-open range [low, high)."""
        return self._gen.integers(low, high, size)

    def shuffle(self, seq: list) -> None:
        self._gen.shuffle(seq)

    def child(self, salt: int) -> "Rng":
        """Derive an independent, reproducible stream."""
        state = np.random.SeedSequence([self.seed, int(salt)]).generate_state(2)
        return Rng((int(state[0]) << 32) | int(state[1]))
