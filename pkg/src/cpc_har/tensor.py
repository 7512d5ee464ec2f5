"""Reverse-mode automatic differentiation on numpy buffers.

A ``Tensor`` wraps an ``np.ndarray`` plus an optional gradient buffer and a
backward closure linking it to its parents. Calling :func:`backward` on a
scalar tensor walks the graph in reverse topological order and accumulates
gradients into every leaf that has ``requires_grad=True``.

Graphs are single-use: a second ``backward`` through the same tensor raises
:class:`GraphError`. Gradient buffers on interior nodes are released during
the traversal so peak memory stays proportional to the live frontier; leaves
keep their ``.grad`` until :func:`zero_grads` clears them.

Every op validates shapes eagerly and raises :class:`ShapeError` with the
offending dimensions in the message rather than letting numpy broadcast its
way into silent nonsense.
"""

from __future__ import annotations

import hashlib
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when operand shapes, dims or sizes are incompatible."""


class GraphError(RuntimeError):
    """Raised on invalid use of the autodiff graph (e.g. stale reuse)."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Context manager that disables graph construction inside its body."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _tag_to_int(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.blake2s(str(tag).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class Rng:
    """Deterministic random stream with derivable child streams.

    Children are derived from the parent seed plus hashed tags, so the same
    (seed, tag path) always yields the same stream no matter how many other
    streams were consumed in between. That property is what makes runs
    reproducible under config-identical reruns.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def child(self, *tags) -> "Rng":
        entropy = [self.seed] + [_tag_to_int(t) for t in tags]
        derived = np.random.SeedSequence(entropy).generate_state(2, dtype=np.uint64)
        return Rng(int(derived[0]) ^ (int(derived[1]) << 1) & 0xFFFFFFFFFFFFFFFF)

    def normal(self, shape=(), scale: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, scale, size=shape)

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low, high=None, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def permutation(self, n_or_array):
        return self._gen.permutation(n_or_array)

    def choice(self, pool, size=None, replace=True):
        return self._gen.choice(pool, size=size, replace=replace)

    def shuffle(self, array) -> None:
        self._gen.shuffle(array)


@dataclass(frozen=True)
class Padding:
    """1-D padding request: mode plus explicit left/right amounts."""

    mode: str  # "zero" or "reflect"
    left: int
    right: int

    def __post_init__(self):
        if self.mode not in ("zero", "reflect"):
            raise ShapeError(f"unknown padding mode {self.mode!r}")
        if self.left < 0 or self.right < 0:
            raise ShapeError(f"negative padding ({self.left}, {self.right})")

    @classmethod
    def zeros(cls, left: int, right: int) -> "Padding":
        return cls("zero", left, right)

    @classmethod
    def reflect(cls, left: int, right: int) -> "Padding":
        return cls("reflect", left, right)

    @classmethod
    def causal(cls, kernel: int) -> "Padding":
        """Left-only zero padding so output position t sees inputs <= t."""
        return cls("zero", kernel - 1, 0)

    @classmethod
    def none(cls) -> "Padding":
        return cls("zero", 0, 0)


class Tensor:
    """An ndarray with an optional grad buffer and backward closure.

    ``_backward`` takes the upstream gradient (an ndarray shaped like
    ``self.data``) and accumulates into the parents via :func:`_acc`; it
    captures parents and saved forward buffers but never ``self``, keeping
    the graph free of reference cycles.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_used")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple = ()
        self._backward = None
        self._used = False

    # -- bookkeeping ------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    def __len__(self):
        return len(self.data)

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return mul(self, 1.0 / other)

    def __rtruediv__(self, other):
        return div(_const(np.asarray(other, dtype=self.data.dtype)), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def relu(self):
        return pointwise(self, "relu")

    def sigmoid(self):
        return pointwise(self, "sigmoid")

    def tanh(self):
        return pointwise(self, "tanh")

    def sqrt(self):
        return tsqrt(self)

    def backward(self):
        backward(self)


def _const(data) -> Tensor:
    return Tensor(data)


def _acc(t: Tensor, g: np.ndarray) -> None:
    """Accumulate gradient g into tensor t (copying on first store).

    The copy matters: closures are allowed to hand over views or shared
    arrays (e.g. the same upstream grad to both addends), and a later
    in-place ``+=`` must never write through into someone else's buffer.
    """
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype)
    else:
        t.grad += g


def _node(data, parents, backward_fn) -> Tensor:
    """Wrap a forward result, attaching the graph only when grads are on."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        out = Tensor(data)
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        return out
    return Tensor(data)


def backward(loss: Tensor) -> None:
    """Backpropagate from a scalar tensor through its graph.

    Populates ``.grad`` on every reachable leaf with ``requires_grad=True``.
    Gradients accumulate across fan-out (a tensor used twice gets the sum of
    both contributions). The graph is consumed: a second call raises
    :class:`GraphError`.
    """
    if loss.data.ndim != 0:
        raise ShapeError(
            f"backward requires a scalar tensor, got shape {loss.data.shape}"
        )
    if loss._used:
        raise GraphError("stale graph: backward was already called through this tensor")
    if not loss.requires_grad:
        raise GraphError("backward on a tensor with no graph (requires_grad=False)")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))

    loss.grad = np.ones((), dtype=loss.data.dtype)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)
            node.grad = None  # interior buffers die young; leaves persist
    loss._used = True


def zero_grads(params) -> None:
    """Clear gradient buffers; accepts a dict of tensors or an iterable."""
    tensors = params.values() if isinstance(params, dict) else params
    for t in tensors:
        t.grad = None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- arithmetic -----------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        scalar = float(b)
        out_data = a.data + scalar

        def bw_scalar(g):
            _acc(a, g)

        return _node(out_data, (a,), bw_scalar)

    try:
        out_data = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from e

    def bw(g):
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(g, b.data.shape))

    return _node(out_data, (a, b), bw)


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        scalar = float(b)
        out_data = a.data * scalar

        def bw_scalar(g):
            _acc(a, g * scalar)

        return _node(out_data, (a,), bw_scalar)

    try:
        out_data = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from e

    def bw(g):
        _acc(a, _unbroadcast(g * b.data, a.data.shape))
        _acc(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(out_data, (a, b), bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    try:
        out_data = a.data / b.data
    except ValueError as e:
        raise ShapeError(f"div: cannot broadcast {a.shape} with {b.shape}") from e

    def bw(g):
        _acc(a, _unbroadcast(g / b.data, a.data.shape))
        _acc(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _node(out_data, (a, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Strict 2-D matrix product [m,k] @ [k,n] -> [m,n].

    Backward: dA = dOut @ B^T, dB = A^T @ dOut.
    """
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def bw(g):
        _acc(a, g @ b.data.T)
        _acc(b, a.data.T @ g)

    return _node(out_data, (a, b), bw)


def tsqrt(a: Tensor) -> Tensor:
    root = np.sqrt(a.data)

    def bw(g):
        _acc(a, g * (0.5 / root))

    return _node(root, (a,), bw)


# -- shape manipulation ---------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    target = np.prod(shape, dtype=np.int64) if shape else 1
    n_minus = sum(1 for s in shape if s == -1)
    if n_minus > 1:
        raise ShapeError(f"reshape: more than one -1 in {shape}")
    if n_minus == 0 and target != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    out_data = a.data.reshape(shape)

    def bw(g):
        _acc(a, g.reshape(a.data.shape))

    return _node(out_data, (a,), bw)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation of {a.ndim} axes")
    inv = np.argsort(axes)
    out_data = a.data.transpose(axes)

    def bw(g):
        _acc(a, g.transpose(inv))

    return _node(out_data, (a,), bw)


def getitem(a: Tensor, key) -> Tensor:
    """Basic indexing (ints, slices, tuples thereof) with scatter backward."""
    out_data = a.data[key]

    def bw(g):
        if not a.requires_grad:
            return
        gx = np.zeros_like(a.data)
        gx[key] += g
        _acc(a, gx)

    return _node(out_data, (a,), bw)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of zero tensors")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        idx = [slice(None)] * g.ndim
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx[axis] = slice(lo, hi)
            _acc(t, g[tuple(idx)])

    return _node(out_data, tuple(tensors), bw)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("stack of zero tensors")
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        for i, t in enumerate(tensors):
            _acc(t, g.take(i, axis=axis))

    return _node(out_data, tuple(tensors), bw)


# -- reductions -----------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            _acc(a, np.broadcast_to(g, a.data.shape))
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        _acc(a, np.broadcast_to(gg, a.data.shape))

    return _node(out_data, (a,), bw)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.shape[ax]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# -- pointwise nonlinearities ---------------------------------------------


def pointwise(x: Tensor, fn: str) -> Tensor:
    """Elementwise nonlinearity: relu, sigmoid or tanh.

    relu uses the subgradient 0 at the kink. sigmoid/tanh backward reuse the
    forward output (s*(1-s) and 1-t^2).
    """
    if fn == "relu":
        out_data = np.maximum(x.data, 0)
        mask = x.data > 0

        def bw(g):
            _acc(x, g * mask)

    elif fn == "sigmoid":
        out_data = 1.0 / (1.0 + np.exp(-x.data))
        s = out_data

        def bw(g):
            _acc(x, g * (s * (1.0 - s)))

    elif fn == "tanh":
        out_data = np.tanh(x.data)
        t = out_data

        def bw(g):
            _acc(x, g * (1.0 - t * t))

    else:
        raise ShapeError(f"unknown pointwise fn {fn!r}")
    return _node(out_data, (x,), bw)


def dropout(x: Tensor, p: float, training: bool, rng: Rng) -> Tensor:
    """Inverted dropout: keep with prob 1-p, scale kept values by 1/(1-p).

    Identity (the same tensor object) when not training or p == 0. The kept
    mask is sampled once and reused by the backward pass.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = (rng.uniform(x.shape) >= p).astype(x.data.dtype)
    factor = keep * x.data.dtype.type(1.0 / (1.0 - p))
    out_data = x.data * factor

    def bw(g):
        _acc(x, g * factor)

    return _node(out_data, (x,), bw)


# -- padding and convolution ----------------------------------------------


def pad1d(x: Tensor, padding: Padding) -> Tensor:
    """Pad the last axis of a [B, C, T] tensor.

    Reflect mode mirrors without repeating the edge sample and requires
    left/right < T; its backward folds gradient contributions back onto the
    source positions they were mirrored from.
    """
    if x.ndim != 3:
        raise ShapeError(f"pad1d expects [B, C, T], got {x.shape}")
    left, right = padding.left, padding.right
    if left == 0 and right == 0:
        return x
    T = x.shape[2]
    if padding.mode == "reflect":
        if left >= T or right >= T:
            raise ShapeError(
                f"reflect padding ({left}, {right}) too large for length {T}"
            )
        out_data = np.pad(x.data, ((0, 0), (0, 0), (left, right)), mode="reflect")
        src = np.pad(np.arange(T), (left, right), mode="reflect")

        def bw(g):
            if not x.requires_grad:
                return
            gx_t = np.zeros((T,) + x.shape[:2], dtype=g.dtype)
            np.add.at(gx_t, src, g.transpose(2, 0, 1))
            _acc(x, gx_t.transpose(1, 2, 0))

    else:
        out_data = np.pad(x.data, ((0, 0), (0, 0), (left, right)))

        def bw(g):
            _acc(x, g[:, :, left:left + T])

    return _node(out_data, (x,), bw)


def conv1d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1,
           padding: Padding | None = None) -> Tensor:
    """1-D cross-correlation over the last axis.

    x: [B, C_in, T], w: [C_out, C_in, K], b: [C_out]. After padding to
    length T_p, output length is floor((T_p - K) / stride) + 1 and
    out[b, o, t] = sum_{c,k} x_p[b, c, t*stride + k] * w[o, c, k] + b[o].

    Implemented as an im2col gather plus one BLAS matmul; the backward
    recomputes the gather from the saved padded input instead of caching it.
    """
    if x.ndim != 3:
        raise ShapeError(f"conv1d input must be [B, C_in, T], got {x.shape}")
    if w.ndim != 3:
        raise ShapeError(f"conv1d weight must be [C_out, C_in, K], got {w.shape}")
    if b.ndim != 1 or b.shape[0] != w.shape[0]:
        raise ShapeError(f"conv1d bias shape {b.shape} != ({w.shape[0]},)")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(
            f"conv1d channel mismatch: input has {x.shape[1]}, weight expects {w.shape[1]}"
        )
    if stride < 1:
        raise ShapeError(f"conv1d stride must be >= 1, got {stride}")

    xp = pad1d(x, padding) if padding is not None else x
    B, C_in, T_p = xp.shape
    C_out, _, K = w.shape
    if K > T_p:
        raise ShapeError(f"kernel {K} larger than padded length {T_p}")
    T_out = (T_p - K) // stride + 1

    def im2col(arr):
        cols = sliding_window_view(arr, K, axis=2)[:, :, ::stride, :]
        return cols.transpose(0, 2, 1, 3).reshape(B * T_out, C_in * K)

    xp_data = xp.data
    mat = im2col(xp_data)
    wmat = w.data.reshape(C_out, C_in * K)
    out = mat @ wmat.T
    out += b.data
    out_data = out.reshape(B, T_out, C_out).transpose(0, 2, 1)

    def bw(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 1)).reshape(B * T_out, C_out)
        _acc(b, gmat.sum(axis=0))
        if w.requires_grad:
            _acc(w, (gmat.T @ im2col(xp_data)).reshape(C_out, C_in, K))
        if xp.requires_grad:
            dcols = (gmat @ wmat).reshape(B, T_out, C_in, K).transpose(0, 2, 1, 3)
            dxp = np.zeros_like(xp_data)
            for k in range(K):
                dxp[:, :, k:k + stride * T_out:stride] += dcols[:, :, :, k]
            _acc(xp, dxp)

    return _node(out_data, (xp, w, b), bw)


# -- normalization --------------------------------------------------------


def group_norm(x: Tensor, num_groups: int, gamma: Tensor, beta: Tensor,
               eps: float = 1e-5) -> Tensor:
    """Normalize [B, C, T] per (batch item, channel group) over channels*time.

    Statistics are computed across every element a group sees in one item;
    gamma/beta are per-channel. Built from engine primitives so the backward
    falls out of autodiff.
    """
    if x.ndim != 3:
        raise ShapeError(f"group_norm expects [B, C, T], got {x.shape}")
    B, C, T = x.shape
    if num_groups < 1 or C % num_groups != 0:
        raise ShapeError(f"channels {C} not divisible into {num_groups} groups")
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(
            f"group_norm affine params must be ({C},), got {gamma.shape} / {beta.shape}"
        )
    xg = reshape(x, (B, num_groups, (C // num_groups) * T))
    mu = tmean(xg, axis=2, keepdims=True)
    centered = add(xg, mul(mu, -1.0))
    var = tmean(mul(centered, centered), axis=2, keepdims=True)
    inv = div(centered, tsqrt(add(var, eps)))
    normed = reshape(inv, (B, C, T))
    return add(mul(normed, reshape(gamma, (1, C, 1))), reshape(beta, (1, C, 1)))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               running_mean: np.ndarray, running_var: np.ndarray,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Feature-wise batch normalization of a [B, F] tensor.

    In training mode the batch mean and (biased) variance normalize the
    batch and update the running buffers in place:
    ``running <- (1 - momentum) * running + momentum * batch_stat``.
    In eval mode the running buffers normalize and no state changes.
    """
    if x.ndim != 2:
        raise ShapeError(f"batch_norm expects [B, F], got {x.shape}")
    B, F = x.shape
    if gamma.shape != (F,) or beta.shape != (F,):
        raise ShapeError(
            f"batch_norm affine params must be ({F},), got {gamma.shape} / {beta.shape}"
        )
    if running_mean.shape != (F,) or running_var.shape != (F,):
        raise ShapeError("batch_norm running buffers must be (F,)")
    if training:
        if B < 2:
            raise ShapeError(f"batch_norm needs batch >= 2 in training, got {B}")
        mu = tmean(x, axis=0, keepdims=True)
        centered = add(x, mul(mu, -1.0))
        var = tmean(mul(centered, centered), axis=0, keepdims=True)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.data.reshape(F)
        running_var *= 1.0 - momentum
        running_var += momentum * var.data.reshape(F)
        normed = div(centered, tsqrt(add(var, eps)))
    else:
        scale = 1.0 / np.sqrt(running_var + eps)
        shifted = add(x, _const(-running_mean.reshape(1, F)))
        normed = mul(shifted, _const(scale.reshape(1, F)))
    return add(mul(normed, reshape(gamma, (1, F))), reshape(beta, (1, F)))


# -- losses ---------------------------------------------------------------


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean cross-entropy of [N, K] logits against integer targets [N].

    Log-probabilities use the logsumexp trick; the fused backward is
    (softmax - onehot) / N, which is both faster and more stable than
    composing the primitive graph.
    """
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects [N, K] logits, got {logits.shape}")
    t = np.asarray(targets)
    if t.ndim != 1 or t.shape[0] != logits.shape[0]:
        raise ShapeError(
            f"targets shape {t.shape} incompatible with logits {logits.shape}"
        )
    if not np.issubdtype(t.dtype, np.integer):
        raise ShapeError(f"targets must be integers, got dtype {t.dtype}")
    N, K = logits.shape
    if t.size and (t.min() < 0 or t.max() >= K):
        raise IndexError(f"target labels outside [0, {K})")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    ez = np.exp(z - m)
    sez = ez.sum(axis=1, keepdims=True)
    logp = (z - m) - np.log(sez)
    loss = -logp[np.arange(N), t].mean()

    def bw(g):
        p = ez / sez
        p[np.arange(N), t] -= 1.0
        _acc(logits, p * (g / N))

    return _node(np.asarray(loss, dtype=z.dtype).reshape(()), (logits,), bw)


def indexed_scores(pred: Tensor, table: Tensor, idx: np.ndarray,
                   chunk: int = 8192) -> Tensor:
    """Dot products of each prediction row against gathered table rows.

    pred: [M, D], table: [P, D], idx: int [M, n] with entries in [0, P).
    out[m, j] = pred[m] . table[idx[m, j]]. This is the hot op of the
    contrastive losses, fused so the gathered [M, n, D] block never lives
    in the graph; forward and backward stream over row chunks and the
    table gradient is a scatter-add over the flattened index list.
    """
    if pred.ndim != 2 or table.ndim != 2:
        raise ShapeError(
            f"indexed_scores expects 2-D pred/table, got {pred.shape} / {table.shape}"
        )
    if pred.shape[1] != table.shape[1]:
        raise ShapeError(
            f"feature dims differ: pred {pred.shape} vs table {table.shape}"
        )
    idx = np.asarray(idx)
    if idx.ndim != 2 or idx.shape[0] != pred.shape[0]:
        raise ShapeError(f"idx shape {idx.shape} incompatible with pred {pred.shape}")
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError(f"idx must be integers, got dtype {idx.dtype}")
    M, D = pred.shape
    P = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= P):
        raise IndexError(f"idx entries outside [0, {P})")

    out_data = np.empty((M, idx.shape[1]), dtype=pred.data.dtype)
    for lo in range(0, M, chunk):
        hi = min(lo + chunk, M)
        gathered = table.data[idx[lo:hi]]  # [c, n, D]
        out_data[lo:hi] = np.einsum("md,mnd->mn", pred.data[lo:hi], gathered)

    def bw(g):
        if pred.requires_grad:
            dp = np.empty_like(pred.data)
            for lo in range(0, M, chunk):
                hi = min(lo + chunk, M)
                dp[lo:hi] = np.einsum(
                    "mn,mnd->md", g[lo:hi], table.data[idx[lo:hi]]
                )
            _acc(pred, dp)
        if table.requires_grad:
            dt = np.zeros_like(table.data)
            for lo in range(0, M, chunk):
                hi = min(lo + chunk, M)
                contrib = g[lo:hi, :, None] * pred.data[lo:hi, None, :]
                np.add.at(dt, idx[lo:hi].ravel(), contrib.reshape(-1, D))
            _acc(table, dt)

    return _node(out_data, (pred, table), bw)


# -- optimizer ------------------------------------------------------------


class OptimizerState:
    """Adam moments plus step count and fixed hyperparameters."""

    def __init__(self, lr: float, weight_decay: float = 0.0,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr < 0:
            raise ValueError(f"learning rate must be >= 0, got {lr}")
        if weight_decay < 0:
            raise ValueError(f"weight decay must be >= 0, got {weight_decay}")
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_step(params: dict[str, Tensor], state: OptimizerState,
              lr: float | None = None) -> None:
    """One Adam update with decoupled weight decay, in place.

    m and v are the usual bias-corrected first/second moments; the update is
    ``p <- p * (1 - lr*wd) - lr * m_hat / (sqrt(v_hat) + eps)`` so decay
    multiplies the pre-step parameter and never touches the moments.
    Params with no gradient buffer are skipped. ``lr`` overrides the state's
    base rate for this step (used by scheduled decay).
    """
    state.step_count += 1
    t = state.step_count
    lr_t = state.lr if lr is None else lr
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params.items():
        if not p.requires_grad or p.grad is None:
            continue
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        if m.shape != p.data.shape:
            raise ShapeError(
                f"optimizer state for {name!r} has shape {m.shape}, param is {p.data.shape}"
            )
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if state.weight_decay:
            p.data *= 1.0 - lr_t * state.weight_decay
        p.data -= lr_t * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
