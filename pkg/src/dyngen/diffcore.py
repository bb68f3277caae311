"""Float64 tensors with a small reverse-mode tape, plus a seeded normal sampler.

Every op takes and returns :class:`Tensor` objects wrapping ``numpy`` arrays.
Leading dimensions are treated as batch dimensions wherever that makes sense,
so the same network code runs on one sequence or on a stack of them.

The tape is implicit: each result remembers its parents and a closure that
pushes the upstream gradient back to them.  :func:`backward` walks the graph
once in reverse creation order and then releases it.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager

import numpy as np

__all__ = [
    "DimensionError",
    "GraphStateError",
    "Tensor",
    "Param",
    "SeededRng",
    "tensor",
    "leaf",
    "frozen_params",
    "affine",
    "activation",
    "conv_transpose2d",
    "conv2d",
    "scale_shift",
    "add",
    "sub",
    "mul",
    "concat",
    "stack",
    "reshape",
    "broadcast_to",
    "take",
    "sum_squares",
    "total",
    "backward",
    "reset_grads",
    "standard_normal",
]


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class GraphStateError(RuntimeError):
    """The graph was already consumed by a previous backward pass."""


_ids = itertools.count()
_local = threading.local()


def _params_frozen() -> bool:
    return getattr(_local, "frozen", False)


@contextmanager
def frozen_params():
    """Treat every :class:`Param` as a constant inside the block (this thread only).

    Used by posterior inference so that parallel Langevin chains never touch
    the shared parameter gradient buffers.
    """
    prev = _params_frozen()
    _local.frozen = True
    try:
        yield
    finally:
        _local.frozen = prev


class Tensor:
    __slots__ = ("data", "grad", "_rg", "_parents", "_backward", "_id", "_consumed")

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None):
        self.data = data
        self.grad = None
        self._rg = requires_grad
        self._parents = parents
        self._backward = backward_fn
        self._id = next(_ids)
        self._consumed = False

    @property
    def requires_grad(self) -> bool:
        return self._rg

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _acc(self, g, index=None):
        if not self.requires_grad:
            return
        if index is None:
            if self.grad is None:
                self.grad = np.array(g, dtype=np.float64, copy=True)
            else:
                self.grad += g
        else:
            if self.grad is None:
                self.grad = np.zeros(self.data.shape)
            self.grad[index] += g

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar for small expressions
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)


class Param(Tensor):
    """A trainable leaf whose gradient accumulates across backward passes."""

    __slots__ = ("name",)

    def __init__(self, value, name=""):
        value = np.array(value, dtype=np.float64)
        super().__init__(value, requires_grad=True)
        self.grad = np.zeros_like(value)
        self.name = name

    @property
    def requires_grad(self) -> bool:
        return not _params_frozen()

    @property
    def value(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def _acc(self, g, index=None):
        if _params_frozen():
            return
        if index is None:
            self.grad += g
        else:
            self.grad[index] += g

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.shape})"


def tensor(x) -> Tensor:
    """Constant tensor (no gradient)."""
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def leaf(x) -> Tensor:
    """Fresh differentiable input, e.g. a latent block."""
    return Tensor(np.array(x, dtype=np.float64, copy=True), requires_grad=True)


def _node(data, parents, backward_fn):
    rg = any(p.requires_grad for p in parents)
    if not rg:
        return Tensor(data)
    return Tensor(data, True, parents, backward_fn)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives


def affine(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """``y[..., j] = sum_i W[j, i] x[..., i] + b[j]``."""
    x, weights, bias = tensor(x), tensor(weights), tensor(bias)
    W = weights.data
    if W.ndim != 2 or x.data.shape[-1:] != W.shape[1:] or bias.data.shape != W.shape[:1]:
        raise DimensionError(
            f"affine: input {x.shape}, weights {weights.shape}, bias {bias.shape} do not conform"
        )
    xd = x.data
    out = xd @ W.T + bias.data

    def bw(g):
        if x.requires_grad:
            x._acc(g @ W)
        if weights.requires_grad:
            g2 = g.reshape(-1, g.shape[-1])
            weights._acc(g2.T @ xd.reshape(-1, xd.shape[-1]))
        if bias.requires_grad:
            bias._acc(g.reshape(-1, g.shape[-1]).sum(axis=0))

    return _node(out, (x, weights, bias), bw)


def activation(x: Tensor, kind: str) -> Tensor:
    """Elementwise ``tanh``, ``relu`` or ``identity``."""
    x = tensor(x)
    if kind == "tanh":
        y = np.tanh(x.data)

        def bw(g):
            x._acc(g * (1.0 - y * y))

    elif kind == "relu":
        pos = x.data > 0
        y = np.where(pos, x.data, 0.0)

        def bw(g):
            x._acc(np.where(pos, g, 0.0))

    elif kind == "identity":
        return x
    else:
        raise ValueError(f"unknown activation {kind!r}")
    return _node(y, (x,), bw)


def _deconv_geometry(h, k, stride, padding):
    full = (h - 1) * stride + k
    return full, full - 2 * padding


def conv_transpose2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 2, padding: int = 1) -> Tensor:
    """Transposed convolution on ``[..., h, w, c_in]`` inputs (HWC layout).

    ``kernel`` has shape ``[k, k, c_in, c_out]``.  Output side length is
    ``(h - 1) * stride + k - 2 * padding``, so the default kernel 4 / stride 2
    / padding 1 gives exactly ``(2h, 2w, c_out)``.

    Implemented as a scatter-add of ``x[i, j] @ kernel[a, b]`` onto output
    position ``(stride*i + a - padding, stride*j + b - padding)``.
    """
    x, kernel, bias = tensor(x), tensor(kernel), tensor(bias)
    K = kernel.data
    if K.ndim != 4 or K.shape[0] != K.shape[1]:
        raise DimensionError(f"conv_transpose2d: kernel must be [k, k, c_in, c_out], got {K.shape}")
    if x.data.ndim < 3 or x.data.shape[-1] != K.shape[2]:
        raise DimensionError(
            f"conv_transpose2d: input channels {x.shape} do not match kernel {K.shape}"
        )
    if bias.data.shape != (K.shape[3],):
        raise DimensionError(f"conv_transpose2d: bias {bias.shape} vs kernel {K.shape}")
    *lead, h, w, _ = x.data.shape
    if h < 1 or w < 1:
        raise DimensionError("conv_transpose2d: spatial dims must be >= 1")
    k = K.shape[0]
    fh, oh = _deconv_geometry(h, k, stride, padding)
    fw, ow = _deconv_geometry(w, k, stride, padding)
    if oh < 1 or ow < 1:
        raise DimensionError("conv_transpose2d: padding leaves an empty output")
    xd = x.data
    full = np.zeros((*lead, fh, fw, K.shape[3]))
    for a in range(k):
        for b in range(k):
            full[..., a : a + stride * h : stride, b : b + stride * w : stride, :] += xd @ K[a, b]
    out = full[..., padding : padding + oh, padding : padding + ow, :] + bias.data

    def bw(g):
        gfull = np.zeros(full.shape)
        gfull[..., padding : padding + oh, padding : padding + ow, :] = g
        if x.requires_grad:
            gx = np.zeros(xd.shape)
            for a in range(k):
                for b in range(k):
                    gx += gfull[..., a : a + stride * h : stride, b : b + stride * w : stride, :] @ K[a, b].T
            x._acc(gx)
        if kernel.requires_grad:
            xf = xd.reshape(-1, xd.shape[-1])
            gk = np.empty(K.shape)
            for a in range(k):
                for b in range(k):
                    sl = gfull[..., a : a + stride * h : stride, b : b + stride * w : stride, :]
                    gk[a, b] = xf.T @ sl.reshape(-1, sl.shape[-1])
            kernel._acc(gk)
        if bias.requires_grad:
            bias._acc(g.reshape(-1, g.shape[-1]).sum(axis=0))

    return _node(out, (x, kernel, bias), bw)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Ordinary (cross-correlation) convolution, HWC layout, square kernel."""
    x, kernel, bias = tensor(x), tensor(kernel), tensor(bias)
    K = kernel.data
    if K.ndim != 4 or K.shape[0] != K.shape[1]:
        raise DimensionError(f"conv2d: kernel must be [k, k, c_in, c_out], got {K.shape}")
    if x.data.ndim < 3 or x.data.shape[-1] != K.shape[2]:
        raise DimensionError(f"conv2d: input channels {x.shape} do not match kernel {K.shape}")
    if bias.data.shape != (K.shape[3],):
        raise DimensionError(f"conv2d: bias {bias.shape} vs kernel {K.shape}")
    *lead, h, w, _ = x.data.shape
    k = K.shape[0]
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1
    if oh < 1 or ow < 1:
        raise DimensionError(f"conv2d: kernel {k} too large for input {h}x{w}")
    pad = [(0, 0)] * len(lead) + [(padding, padding), (padding, padding), (0, 0)]
    xp = np.pad(x.data, pad)
    out = np.zeros((*lead, oh, ow, K.shape[3]))
    for a in range(k):
        for b in range(k):
            out += xp[..., a : a + stride * oh : stride, b : b + stride * ow : stride, :] @ K[a, b]
    out += bias.data

    def bw(g):
        if x.requires_grad:
            gxp = np.zeros(xp.shape)
            for a in range(k):
                for b in range(k):
                    gxp[..., a : a + stride * oh : stride, b : b + stride * ow : stride, :] += g @ K[a, b].T
            x._acc(gxp[..., padding : padding + h, padding : padding + w, :])
        if kernel.requires_grad:
            gf = g.reshape(-1, g.shape[-1])
            gk = np.empty(K.shape)
            for a in range(k):
                for b in range(k):
                    sl = xp[..., a : a + stride * oh : stride, b : b + stride * ow : stride, :]
                    gk[a, b] = sl.reshape(-1, sl.shape[-1]).T @ gf
            kernel._acc(gk)
        if bias.requires_grad:
            bias._acc(g.reshape(-1, g.shape[-1]).sum(axis=0))

    return _node(out, (x, kernel, bias), bw)


def scale_shift(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """Per-channel ``x * scale + shift`` over the last axis."""
    x, scale, shift = tensor(x), tensor(scale), tensor(shift)
    if scale.shape != x.shape[-1:] or shift.shape != x.shape[-1:]:
        raise DimensionError(f"scale_shift: {x.shape} vs {scale.shape}/{shift.shape}")
    xd, sd = x.data, scale.data
    out = xd * sd + shift.data

    def bw(g):
        x._acc(g * sd)
        g2 = g.reshape(-1, g.shape[-1])
        scale._acc((g2 * xd.reshape(-1, xd.shape[-1])).sum(axis=0))
        shift._acc(g2.sum(axis=0))

    return _node(out, (x, scale, shift), bw)


def add(x, y) -> Tensor:
    x, y = tensor(x), tensor(y)
    out = x.data + y.data

    def bw(g):
        x._acc(_unbroadcast(g, x.shape))
        y._acc(_unbroadcast(g, y.shape))

    return _node(out, (x, y), bw)


def sub(x, y) -> Tensor:
    x, y = tensor(x), tensor(y)
    out = x.data - y.data

    def bw(g):
        x._acc(_unbroadcast(g, x.shape))
        y._acc(-_unbroadcast(g, y.shape))

    return _node(out, (x, y), bw)


def mul(x, y) -> Tensor:
    x, y = tensor(x), tensor(y)
    xd, yd = x.data, y.data
    out = xd * yd

    def bw(g):
        if x.requires_grad:
            x._acc(_unbroadcast(g * yd, x.shape))
        if y.requires_grad:
            y._acc(_unbroadcast(g * xd, y.shape))

    return _node(out, (x, y), bw)


def concat(parts, axis: int = -1) -> Tensor:
    parts = [tensor(p) for p in parts]
    if len(parts) == 1:
        return parts[0]
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {[p.shape for p in parts]}: {exc}") from None
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def bw(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                p._acc(g[tuple(idx)])

    return _node(out, tuple(parts), bw)


def stack(parts, axis: int = 0) -> Tensor:
    parts = [tensor(p) for p in parts]
    out = np.stack([p.data for p in parts], axis=axis)

    def bw(g):
        gs = np.moveaxis(g, axis, 0)
        for p, gi in zip(parts, gs):
            p._acc(gi)

    return _node(out, tuple(parts), bw)


def reshape(x: Tensor, shape) -> Tensor:
    x = tensor(x)
    src = x.shape
    out = x.data.reshape(shape)

    def bw(g):
        x._acc(g.reshape(src))

    return _node(out, (x,), bw)


def broadcast_to(x: Tensor, shape) -> Tensor:
    x = tensor(x)
    src = x.shape
    out = np.broadcast_to(x.data, shape)

    def bw(g):
        x._acc(_unbroadcast(g, src))

    return _node(out, (x,), bw)


def take(x: Tensor, index) -> Tensor:
    """Basic-indexing view ``x[index]``; gradient is scattered back in place."""
    x = tensor(x)
    out = x.data[index]

    def bw(g):
        x._acc(g, index)

    return _node(out, (x,), bw)


def sum_squares(x: Tensor, keep: int = 0) -> Tensor:
    """Sum of squares over all axes except the first ``keep`` ones."""
    x = tensor(x)
    xd = x.data
    axes = tuple(range(keep, xd.ndim))
    out = np.sum(xd * xd, axis=axes) if axes else xd * xd

    def bw(g):
        x._acc(2.0 * xd * np.reshape(g, g.shape + (1,) * len(axes)))

    return _node(np.asarray(out, dtype=np.float64), (x,), bw)


def total(x: Tensor) -> Tensor:
    """Sum of all entries, as a 0-d tensor."""
    x = tensor(x)
    shape = x.shape

    def bw(g):
        x._acc(np.broadcast_to(g, shape))

    return _node(np.asarray(x.data.sum()), (x,), bw)


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor, seed=None) -> None:
    """Accumulate ``d loss / d leaf`` into every differentiable leaf.

    ``loss`` is normally a scalar; ``seed`` may supply the upstream gradient
    for a non-scalar output.  The graph is released afterwards, so calling
    this twice on the same output raises :class:`GraphStateError`.
    """
    if loss._consumed:
        raise GraphStateError("backward already ran on this graph; run a new forward pass")
    if seed is None:
        if loss.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss or an explicit seed, got {loss.shape}")
        seed = np.ones(loss.shape)
    loss._consumed = True
    if not loss.requires_grad:
        return
    nodes = []
    seen = set()
    stack_ = [loss]
    while stack_:
        n = stack_.pop()
        if n._id in seen:
            continue
        seen.add(n._id)
        nodes.append(n)
        for p in n._parents:
            if p._id not in seen and p.requires_grad:
                stack_.append(p)
    nodes.sort(key=lambda n: n._id, reverse=True)
    if loss.is_leaf:
        loss._acc(np.broadcast_to(seed, loss.shape))
        return
    loss.grad = np.array(seed, dtype=np.float64)
    for n in nodes:
        if n._backward is not None and n.grad is not None:
            n._backward(n.grad)
    for n in nodes:
        if n._parents:
            n.grad = None
            n._parents = ()
            n._backward = None
            n._consumed = True


def reset_grads(params) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# random numbers


class SeededRng:
    """Counter-based normal sampler.

    Uniforms come from a Philox counter stream keyed by ``seed`` (and an
    optional ``stream`` path used to split independent substreams).  Normals
    are produced by the Box-Muller transform, pairing consecutive uniforms
    ``(u1, u2)`` into ``sqrt(-2 ln(1 - u1)) * (cos 2 pi u2, sin 2 pi u2)``.
    """

    def __init__(self, seed: int = 0, stream=()):
        self.seed = int(seed)
        self.stream = tuple(int(s) for s in stream)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.stream)
        self._bitgen = np.random.Philox(ss)
        self._gen = np.random.Generator(self._bitgen)

    def spawn(self, *key) -> "SeededRng":
        """Independent child stream, reproducible from ``(seed, stream + key)``."""
        return SeededRng(self.seed, self.stream + tuple(key))

    def uniform(self, n: int) -> np.ndarray:
        return self._gen.random(n)

    def standard_normal(self, shape) -> np.ndarray:
        shape = (int(shape),) if np.ndim(shape) == 0 else tuple(int(s) for s in shape)
        n = int(np.prod(shape, dtype=np.int64))
        if n == 0:
            return np.zeros(shape)
        half = (n + 1) // 2
        u = self.uniform(2 * half)
        r = np.sqrt(-2.0 * np.log1p(-u[:half]))
        theta = 2.0 * np.pi * u[half:]
        z = np.empty(2 * half)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return z[:n].reshape(shape)

    def get_state(self) -> dict:
        return {"seed": self.seed, "stream": list(self.stream), "bitgen": self._bitgen.state}

    @classmethod
    def from_state(cls, state: dict) -> "SeededRng":
        rng = cls(state["seed"], state["stream"])
        rng._bitgen.state = state["bitgen"]
        return rng


def standard_normal(rng: SeededRng, shape) -> Tensor:
    return Tensor(rng.standard_normal(shape))
