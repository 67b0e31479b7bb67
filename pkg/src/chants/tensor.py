"""Dense float64 tensors with reverse-mode differentiation.

Everything is built on numpy arrays in row-major order. A ``Tensor`` is a
value plus an optional tape node; calling :meth:`Tensor.backward` on a scalar
result accumulates gradients into every reachable tensor that has
``requires_grad`` set. Shapes follow numpy conventions; matrix operations act
on the last two axes and broadcast over any leading (batch) axes.
"""

from __future__ import annotations

import contextlib
import math
import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ConfigError, ShapeError

__all__ = [
    "AttnWeights",
    "Tensor",
    "add",
    "concat",
    "constant",
    "cosine_similarity",
    "cross_entropy",
    "div",
    "dropout",
    "exp",
    "ffn",
    "flop_estimate",
    "gelu",
    "layer_norm",
    "log",
    "logsumexp",
    "matmul",
    "mean",
    "mul",
    "multi_head_attention",
    "no_grad",
    "parameter",
    "reshape",
    "softmax",
    "sqrt",
    "tensor_sum",
    "transpose",
]

_GRAD_ENABLED = True

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (pure forward passes)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A float64 array with an optional reverse-mode tape node.

    Gradients accumulate additively into ``.grad`` across backward passes;
    callers reset leaf gradients between optimizer steps.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """A view of the same data cut off from the tape."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable ``requires_grad`` leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(
                    f"backward() without an explicit gradient needs a scalar, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=np.float64)

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

        self.grad = grad if self.grad is None else self.grad + grad
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, mul(constant(-1.0), other))

    def __rsub__(self, other):
        return add(other, mul(constant(-1.0), self))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(constant(-1.0), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def constant(value) -> Tensor:
    """Wrap raw data as a non-trainable tensor."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def parameter(value, rng: np.random.Generator | None = None) -> Tensor:
    """Wrap raw data as a trainable leaf."""
    del rng
    return Tensor(value, requires_grad=True)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _accum(t: Tensor, grad: np.ndarray) -> None:
    # grad buffers are never mutated in place, so aliasing is safe here
    if not t.requires_grad:
        return
    grad = _unbroadcast(grad, t.data.shape)
    t.grad = grad if t.grad is None else t.grad + grad


# ---------------------------------------------------------------------------
# elementwise and structural primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, g)

    return _make(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, g * b.data)
        if b.requires_grad:
            _accum(b, g * a.data)

    return _make(out_data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    out_data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, g / b.data)
        if b.requires_grad:
            _accum(b, -g * a.data / (b.data * b.data))

    return _make(out_data, (a, b), backward)


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = constant(a), constant(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            _accum(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            if b.ndim == 2 and g.ndim > 2:
                # batched input against a shared matrix: collapse the batch
                # axes into one product instead of reducing per-batch results
                k = a.shape[-1]
                _accum(b, a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1]))
            else:
                _accum(b, np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _make(out_data, (a, b), backward)


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; with no ``axes``, swap the last two."""
    a = constant(a)
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out_data = np.transpose(a.data, axes)

    def backward(g):
        _accum(a, np.transpose(g, inverse))

    return _make(out_data, (a,), backward)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = constant(a)
    shape = tuple(shape)
    out_data = a.data.reshape(shape)

    def backward(g):
        _accum(a, g.reshape(a.data.shape))

    return _make(out_data, (a,), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    parts = [constant(t) for t in tensors]
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(lo, hi)
                _accum(p, g[tuple(index)])

    return _make(out_data, tuple(parts), backward)


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = constant(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape))

    return _make(out_data, (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = constant(a)
    if axis is None:
        count = a.data.size
    else:
        count = a.data.shape[axis]
    return mul(tensor_sum(a, axis=axis, keepdims=keepdims), constant(1.0 / count))


def exp(a) -> Tensor:
    a = constant(a)
    out_data = np.exp(a.data)

    def backward(g):
        _accum(a, g * out_data)

    return _make(out_data, (a,), backward)


def log(a) -> Tensor:
    a = constant(a)
    out_data = np.log(a.data)

    def backward(g):
        _accum(a, g / a.data)

    return _make(out_data, (a,), backward)


def sqrt(a) -> Tensor:
    a = constant(a)
    out_data = np.sqrt(a.data)

    def backward(g):
        _accum(a, g * 0.5 / out_data)

    return _make(out_data, (a,), backward)


def gelu(a) -> Tensor:
    """Gaussian error linear unit, exact erf formulation."""
    a = constant(a)
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    out_data = a.data * cdf

    def backward(g):
        pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT_2PI
        _accum(a, g * (cdf + a.data * pdf))

    return _make(out_data, (a,), backward)


def dropout(a, rate: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout; identity when ``train`` is false or ``rate`` is 0."""
    a = constant(a)
    if not train or rate <= 0.0:
        return a
    if not 0.0 < rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if rng is None:
        raise ConfigError("dropout in training mode needs an explicit rng")
    mask = (rng.random(a.data.shape) >= rate) / (1.0 - rate)
    out_data = a.data * mask

    def backward(g):
        _accum(a, g * mask)

    return _make(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# normalization, attention, losses
# ---------------------------------------------------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    """Softmax along ``axis``, computed with max subtraction for stability."""
    a = constant(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        _accum(a, out_data * (g - inner))

    return _make(out_data, (a,), backward)


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    """log(sum(exp(a))) along ``axis`` with max subtraction."""
    a = constant(a)
    shift = constant(a.data.max(axis=axis, keepdims=True))
    s = log(tensor_sum(exp(add(a, mul(constant(-1.0), shift))), axis=axis, keepdims=True))
    out = add(s, shift)
    if not keepdims:
        out = reshape(out, tuple(d for i, d in enumerate(out.shape) if i != (axis % out.ndim)))
    return out


def layer_norm(x, gain, bias, eps: float = 1e-12) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine.

    ``eps`` sits inside the square root, so constant rows map to zero.
    """
    x, gain, bias = constant(x), constant(gain), constant(bias)
    if x.shape[-1] != gain.shape[-1] or x.shape[-1] != bias.shape[-1]:
        raise ShapeError(
            f"layer_norm feature axis {x.shape[-1]} does not match gain {gain.shape} / bias {bias.shape}"
        )
    mu = mean(x, axis=-1, keepdims=True)
    centered = add(x, mul(constant(-1.0), mu))
    var = mean(mul(centered, centered), axis=-1, keepdims=True)
    normed = div(centered, sqrt(add(var, constant(eps))))
    return add(mul(normed, gain), bias)


@dataclass
class AttnWeights:
    """Projection matrices for one attention block; ``w_o`` may be absent."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor | None = None


def _split_heads(x: Tensor, heads: int) -> Tensor:
    """(..., L, D) -> (..., heads, L, D // heads)."""
    *lead, length, width = x.shape
    x = reshape(x, (*lead, length, heads, width // heads))
    n = x.ndim
    axes = tuple(range(n - 3)) + (n - 2, n - 3, n - 1)
    return transpose(x, axes)


def _merge_heads(x: Tensor) -> Tensor:
    """(..., heads, L, d_h) -> (..., L, heads * d_h)."""
    n = x.ndim
    axes = tuple(range(n - 3)) + (n - 2, n - 3, n - 1)
    x = transpose(x, axes)
    *lead, length, heads, dh = x.shape
    return reshape(x, (*lead, length, heads * dh))


def multi_head_attention(
    q_in,
    kv_in,
    weights,
    heads: int,
    stats: dict | None = None,
) -> Tensor:
    """Scaled dot-product attention with per-head scale 1/sqrt(D/heads).

    ``weights`` carries D x D projections ``w_q``, ``w_k``, ``w_v`` and an
    optional output projection ``w_o`` applied after head concatenation.
    Inputs are (..., L_q, D) queries against (..., L_k, D) keys/values;
    ``stats`` (if given) accumulates the multiply-accumulate count of the
    attention-score product under ``"score_macs"``.
    """
    q_in, kv_in = constant(q_in), constant(kv_in)
    width = q_in.shape[-1]
    if width % heads != 0:
        raise ConfigError(f"model width {width} is not divisible by {heads} heads")
    if kv_in.shape[-1] != width:
        raise ShapeError(f"query width {width} does not match key/value width {kv_in.shape[-1]}")
    dh = width // heads

    q = _split_heads(matmul(q_in, weights.w_q), heads)
    k = _split_heads(matmul(kv_in, weights.w_k), heads)
    v = _split_heads(matmul(kv_in, weights.w_v), heads)

    scores = mul(matmul(q, transpose(k)), constant(1.0 / math.sqrt(dh)))
    if stats is not None:
        l_q, l_k = q_in.shape[-2], kv_in.shape[-2]
        stats["score_macs"] = stats.get("score_macs", 0) + l_q * l_k * width
        stats.setdefault("score_shapes", []).append((l_q, l_k))
    attn = softmax(scores, axis=-1)
    out = _merge_heads(matmul(attn, v))
    if weights.w_o is not None:
        out = matmul(out, weights.w_o)
    return out


def ffn(x, w1, b1, w2, b2, *, rate: float = 0.0, rng=None, train: bool = False) -> Tensor:
    """Two affine maps with a GELU between; dropout after the activation."""
    h = gelu(add(matmul(x, w1), b1))
    h = dropout(h, rate, rng, train)
    return add(matmul(h, w2), b2)


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log softmax probability of the true class.

    ``logits`` is (n, k); ``labels`` is n integers in [0, k).
    """
    logits = constant(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects (n, k) logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy got {n} logit rows but labels of shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        bad = labels[(labels < 0) | (labels >= k)][0]
        raise IndexError(f"label {bad} outside [0, {k})")
    log_probs = add(logits, mul(constant(-1.0), logsumexp(logits, axis=-1, keepdims=True)))
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    picked = tensor_sum(mul(log_probs, constant(onehot)))
    return mul(picked, constant(-1.0 / n))


def cosine_similarity(u, v) -> Tensor:
    """u.v / (|u||v|); a zero vector yields 0 with a warning instead of NaN."""
    u, v = constant(u), constant(v)
    if u.shape != v.shape or u.ndim != 1:
        raise ShapeError(f"cosine_similarity expects equal-length vectors, got {u.shape} and {v.shape}")
    nu = float(np.linalg.norm(u.data))
    nv = float(np.linalg.norm(v.data))
    if nu == 0.0 or nv == 0.0:
        warnings.warn("cosine_similarity of a zero vector is defined as 0", RuntimeWarning)
        return constant(0.0)
    dot = tensor_sum(mul(u, v))
    norm_u = sqrt(tensor_sum(mul(u, u)))
    norm_v = sqrt(tensor_sum(mul(v, v)))
    return div(dot, mul(norm_u, norm_v))


# ---------------------------------------------------------------------------
# cost accounting
# ---------------------------------------------------------------------------


def flop_estimate(steps: int, channels: int, width: int, interactive: bool) -> int:
    """Attention-score multiply-accumulates for one two-tower layer.

    Cross-attending towers score time-against-channel twice (2*T*C*D);
    self-attending towers pay (T^2 + C^2)*D.
    """
    if steps <= 0 or channels <= 0 or width <= 0:
        raise ConfigError(
            f"flop_estimate needs positive dimensions, got T={steps}, C={channels}, D={width}"
        )
    if interactive:
        return 2 * steps * channels * width
    return (steps * steps + channels * channels) * width
