"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a row-major numpy buffer (float32 or float64) plus an
optional gradient.  Operations executed inside a :class:`GradTape` context
append :class:`TapeNode` entries; :func:`backward` replays the tape in strict
reverse order and accumulates gradients into every ``requires_grad`` leaf.

Precision is uniform per graph: mixing float32 and float64 operands raises.
Broadcasting is deliberately restricted to scalars and trailing row vectors
(shape ``(d,)`` against ``(..., d)``); anything else must match exactly or be
made explicit with :func:`broadcast_to`.  Repeated ``backward`` calls without
clearing gradients accumulate; the training harness zeroes grads each step.

A tape is confined to one thread.  Tensors that never enter a tape are safe
to share across threads for read-only evaluation.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ConfigError, ContractError, NumericError, ShapeError

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_state = threading.local()


def _active_tape() -> "GradTape | None":
    return getattr(_state, "tape", None)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


class TapeNode:
    """One recorded operation: inputs, output, and its vector-Jacobian product."""

    __slots__ = ("op", "inputs", "output", "vjp")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], output: Tensor,
                 vjp: Callable[[np.ndarray], tuple]):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


class GradTape:
    """Append-only record of operations, replayed in reverse by backward()."""

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def __enter__(self) -> "GradTape":
        if _active_tape() is not None:
            raise ContractError("a GradTape is already active on this thread")
        _state.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _state.tape = None
        return False

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ContractError(
                f"backward requires a scalar loss, got shape {loss.data.shape}")
        flowing: dict[int, tuple[Tensor, np.ndarray]] = {
            id(loss): (loss, np.ones_like(loss.data))
        }
        for node in reversed(self.nodes):
            entry = flowing.pop(id(node.output), None)
            if entry is None:
                continue
            grads = node.vjp(entry[1])
            for t, g in zip(node.inputs, grads):
                if g is None or not t.requires_grad:
                    continue
                prev = flowing.get(id(t))
                flowing[id(t)] = (t, g if prev is None else prev[1] + g)
        for t, g in flowing.values():
            if t.requires_grad:
                t.grad = g if t.grad is None else t.grad + g


def backward(loss: Tensor, tape: GradTape | None = None) -> None:
    """Populate grads of every requires_grad leaf reachable from ``loss``."""
    tape = tape if tape is not None else _active_tape()
    if tape is None:
        raise ContractError("backward called with no active GradTape")
    tape.backward(loss)


def _record(op: str, inputs: tuple[Tensor, ...], out: Tensor,
            vjp: Callable[[np.ndarray], tuple]) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(TapeNode(op, inputs, out, vjp))
    return out


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _check_dtype(op: str, *tensors: Tensor) -> None:
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ContractError(
            f"{op}: mixed precision in one graph: {sorted(d.name for d in dtypes)}")


# ---------------------------------------------------------------------------
# broadcasting helpers (scalar and trailing row-vector only)

def _broadcast_mode(sa: tuple[int, ...], sb: tuple[int, ...]) -> str:
    if sa == sb:
        return "same"
    if sb == () or sb == (1,):
        return "scalar_b"
    if sa == () or sa == (1,):
        return "scalar_a"
    if len(sb) == 1 and len(sa) >= 1 and sa[-1] == sb[0]:
        return "row_b"
    if len(sa) == 1 and len(sb) >= 1 and sb[-1] == sa[0]:
        return "row_a"
    raise ShapeError(f"shapes {sa} and {sb} are not broadcast-compatible "
                     "(only scalar and trailing row-vector broadcast are supported)")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of scalar/row-vector broadcast)."""
    if g.shape == shape:
        return g
    if shape == () or shape == (1,):
        return g.sum().reshape(shape)
    return g.reshape(-1, shape[0]).sum(axis=0)


def _binary(op: str, a, b, fwd, vjp_a, vjp_b) -> Tensor:
    if not isinstance(a, Tensor) and isinstance(b, Tensor):
        a = _as_tensor(a, b)
    elif not isinstance(b, Tensor) and isinstance(a, Tensor):
        b = _as_tensor(b, a)
    _check_dtype(op, a, b)
    _broadcast_mode(a.shape, b.shape)  # validate
    out = Tensor(fwd(a.data, b.data))
    sa, sb = a.shape, b.shape

    def vjp(g: np.ndarray):
        ga = _reduce_to(vjp_a(g, a.data, b.data), sa)
        gb = _reduce_to(vjp_b(g, a.data, b.data), sb)
        return ga, gb

    return _record(op, (a, b), out, vjp)


# ---------------------------------------------------------------------------
# elementwise operations

def add(a, b) -> Tensor:
    return _binary("add", a, b, lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, lambda x, y: x - y,
                   lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b) -> Tensor:
    return _binary("mul", a, b, lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a, b) -> Tensor:
    return _binary("div", a, b, lambda x, y: x / y,
                   lambda g, x, y: g / y, lambda g, x, y: -g * x / (y * y))


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    return _record("neg", (a,), out, lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0  # gradient at exactly 0 is defined as 0
    out = Tensor(np.where(mask, a.data, 0))
    return _record("relu", (a,), out, lambda g: (g * mask,))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU: 0.5*x*(1 + erf(x/sqrt(2)))."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = Tensor((x * cdf).astype(a.dtype, copy=False))

    def vjp(g: np.ndarray):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        return (g * (cdf + x * pdf),)

    return _record("gelu", (a,), out, vjp)


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)
    out = Tensor(y)
    return _record("sqrt", (a,), out, lambda g: (g / (2.0 * y),))


def dropout(a: Tensor, p: float, rng: np.random.Generator | None,
            training: bool) -> Tensor:
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p).

    Eval mode (and p == 0) is the identity and consumes no randomness.
    """
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return a
    if rng is None:
        raise ContractError("training-mode dropout requires an rng")
    keep = rng.random(a.shape) >= p
    scale = np.asarray(1.0 / (1.0 - p), dtype=a.dtype)
    factor = keep * scale
    out = Tensor(a.data * factor)
    return _record("dropout", (a,), out, lambda g: (g * factor,))


# ---------------------------------------------------------------------------
# shape manipulation

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = Tensor(a.data.reshape(shape))
    orig = a.shape
    return _record("reshape", (a,), out, lambda g: (g.reshape(orig),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(np.ascontiguousarray(a.data.transpose(axes)))
    return _record("transpose", (a,), out, lambda g: (g.transpose(inv),))


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit expansion of leading and size-1 axes (the only broadcast
    beyond the add/mul scalar and row-vector rules)."""
    shape = tuple(shape)
    extra = len(shape) - len(a.shape)
    if extra < 0:
        raise ShapeError(f"broadcast_to cannot drop axes: {a.shape} -> {shape}")
    for da, ds in zip(a.shape, shape[extra:]):
        if da != ds and da != 1:
            raise ShapeError(f"broadcast_to: {a.shape} does not expand to {shape}")
    out = Tensor(np.broadcast_to(a.data, shape).copy())
    lead = tuple(range(extra))
    kept = tuple(extra + i for i, (da, ds) in enumerate(zip(a.shape, shape[extra:]))
                 if da == 1 and ds != 1)

    def vjp(g: np.ndarray):
        if kept:
            g = g.sum(axis=kept, keepdims=True)
        if lead:
            g = g.sum(axis=lead)
        return (g.reshape(a.shape),)

    return _record("broadcast_to", (a,), out, vjp)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    _check_dtype("concat", *tensors)
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g: np.ndarray):
        return tuple(np.split(g, splits, axis=axis))

    return _record("concat", tuple(tensors), out, vjp)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis (like tensor[..., start:start+length, ...])."""
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = Tensor(a.data[idx].copy())

    def vjp(g: np.ndarray):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _record("narrow", (a,), out, vjp)


def tsum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))
    shape = a.shape

    def vjp(g: np.ndarray):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        ge = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(ge, shape).copy(),)

    return _record("sum", (a,), out, vjp)


def tmean(a: Tensor, axis: int | tuple[int, ...] | None = None,
          keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.mean(axis=axis, keepdims=keepdims))
    shape = a.shape
    n = a.data.size // out.data.size

    def vjp(g: np.ndarray):
        if axis is None:
            ge = g
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            ge = g
            if not keepdims:
                for ax in sorted(axes):
                    ge = np.expand_dims(ge, ax)
        return (np.broadcast_to(ge, shape) / n,)

    return _record("mean", (a,), out, vjp)


# ---------------------------------------------------------------------------
# matmul

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Supports (m,k)@(k,n), stacked (...,m,k)@(k,n), and stacked pairs with
    identical leading dims (...,m,k)@(...,k,n).
    """
    _check_dtype("matmul", a, b)
    sa, sb = a.shape, b.shape
    if len(sa) < 2 or len(sb) < 2:
        raise ShapeError(f"matmul requires >=2-d operands, got {sa} x {sb}")
    if sa[-1] != sb[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {sa} x {sb}")
    if len(sb) > 2 and sa[:-2] != sb[:-2]:
        raise ShapeError(f"matmul leading dimensions must match exactly: {sa} x {sb}")
    out = Tensor(a.data @ b.data)

    def vjp(g: np.ndarray):
        if len(sb) == 2:
            ga = g @ b.data.T
            gb = a.data.reshape(-1, sa[-1]).T @ g.reshape(-1, sb[-1])
        else:
            ga = g @ b.data.swapaxes(-1, -2)
            gb = a.data.swapaxes(-1, -2) @ g
        return ga, gb

    return _record("matmul", (a, b), out, vjp)


# ---------------------------------------------------------------------------
# normalization / softmax / loss

def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1] if x.shape else 0
    if d == 0:
        raise ShapeError("layernorm over an empty last axis")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layernorm affine params must have shape ({d},), got {gamma.shape}/{beta.shape}")
    _check_dtype("layernorm", x, gamma, beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    xhat = xc * inv_std
    out = Tensor(gamma.data * xhat + beta.data)

    def vjp(g: np.ndarray):
        gg = g * gamma.data
        m1 = gg.mean(axis=-1, keepdims=True)
        m2 = (gg * xhat).mean(axis=-1, keepdims=True)
        gx = (gg - m1 - xhat * m2) * inv_std
        flat = (-1, d)
        ggamma = (g * xhat).reshape(flat).sum(axis=0)
        gbeta = g.reshape(flat).sum(axis=0)
        return gx, ggamma, gbeta

    return _record("layernorm", (x, gamma, beta), out, vjp)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-stabilized softmax over the last axis; each row sums to 1."""
    if not np.isfinite(x.data).all():
        raise NumericError("softmax_rows requires finite inputs")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def vjp(g: np.ndarray):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _record("softmax_rows", (x,), out, vjp)


def cross_entropy_label_smoothed(logits: Tensor, targets: np.ndarray,
                                 eps: float = 0.0) -> Tensor:
    """Mean batch cross-entropy against (1-eps)*onehot + eps/C targets."""
    if not 0.0 <= eps < 1.0:
        raise ConfigError(f"label smoothing must be in [0, 1), got {eps}")
    if logits.data.ndim != 2:
        raise ShapeError(f"logits must be 2-d (batch x classes), got {logits.shape}")
    targets = np.asarray(targets)
    b, c = logits.shape
    if targets.shape != (b,):
        raise ShapeError(f"targets must have shape ({b},), got {targets.shape}")
    if targets.min(initial=0) < 0 or targets.max(initial=0) >= c:
        raise IndexError(f"target index out of range [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    q = np.full((b, c), eps / c, dtype=logits.dtype)
    q[np.arange(b), targets] += np.asarray(1.0 - eps, dtype=logits.dtype)
    loss_val = -(q * logp).sum() / b
    out = Tensor(np.asarray(loss_val, dtype=logits.dtype))
    p = np.exp(logp)

    def vjp(g: np.ndarray):
        return (g * (p - q) / b,)

    return _record("cross_entropy", (logits,), out, vjp)


# ---------------------------------------------------------------------------
# 2-d convolution (NCHW), used only by the CNN baseline

def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    b, c = xp.shape[:2]
    sb, sc, sh, sw = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp, (b, c, ho, wo, k, k),
        (sb, sc, sh * stride, sw * stride, sh, sw), writeable=False)
    return view.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * k * k)


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """2-d convolution, x: (B,C,H,W), w: (O,C,k,k), bias: (O,)."""
    _check_dtype("conv2d", *( (x, w, bias) if bias is not None else (x, w) ))
    b, c, h, wdt = x.shape
    o, cw, k, k2 = w.shape
    if cw != c or k != k2:
        raise ShapeError(f"conv2d weight {w.shape} incompatible with input {x.shape}")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wdt + 2 * padding - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, k, stride, ho, wo)
    w2 = w.data.reshape(o, c * k * k)
    y2 = cols @ w2.T
    if bias is not None:
        y2 = y2 + bias.data
    out = Tensor(y2.reshape(b, ho, wo, o).transpose(0, 3, 1, 2))

    def vjp(g: np.ndarray):
        g2 = g.transpose(0, 2, 3, 1).reshape(b * ho * wo, o)
        gw = (g2.T @ cols).reshape(w.shape)
        gcols = g2 @ w2
        gxp = np.zeros_like(xp)
        gpatch = gcols.reshape(b, ho, wo, c, k, k).transpose(0, 3, 1, 2, 4, 5)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    gpatch[:, :, :, :, i, j]
        gx = gxp[:, :, padding:padding + h, padding:padding + wdt] if padding else gxp
        gb = g2.sum(axis=0) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, w, bias) if bias is not None else (x, w)
    return _record("conv2d", inputs, out, vjp)
