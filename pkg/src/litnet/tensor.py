"""Dense tensor arithmetic with reverse-mode automatic differentiation.

Data lives in numpy arrays: channels last, row major, float32 or float64.
Ops are pure functions of their inputs. While a ``Tape`` is active on the
current thread, each differentiable op appends one node to it;
``backward`` replays the nodes in reverse and accumulates gradients into
every ``requires_grad`` leaf. A tape serves exactly one forward
computation and is consumed by its backward pass.

Every op checks its output for non-finite values and raises
``NumericError`` instead of propagating them.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import NumericError, ShapeError, StateError, ValidationError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """A dense n-dimensional array with optional gradient tracking.

    ``grad`` is populated (same shape as ``data``) only after a backward
    pass reaches this tensor as a ``requires_grad`` leaf.
    """

    __slots__ = ("data", "requires_grad", "grad", "tape")

    def __init__(self, data: np.ndarray, requires_grad: bool = False):
        if not isinstance(data, np.ndarray):
            data = np.asarray(data, dtype=np.float64)
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float64)
        self.data = data
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.tape: "Tape | None" = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Operator sugar; the function forms below are the primary API.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(values, dtype=np.float64, requires_grad: bool = False) -> Tensor:
    """Wrap ``values`` in a Tensor with the given dtype."""
    return Tensor(np.asarray(values, dtype=dtype), requires_grad=requires_grad)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


# --------------------------------------------------------------------------
# Tape machinery
# --------------------------------------------------------------------------

_LOCAL = threading.local()


def _tape_stack() -> list:
    stack = getattr(_LOCAL, "stack", None)
    if stack is None:
        stack = []
        _LOCAL.stack = stack
    return stack


def _current_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of differentiable ops for one forward computation.

    Use as a context manager around the forward pass, then call
    ``backward`` on the recorded loss. Tapes are confined to one thread
    and one computation; backward consumes the tape.
    """

    __slots__ = ("_nodes", "_produced", "_consumed")

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._produced: set[int] = set()
        self._consumed = False

    def __enter__(self) -> "Tape":
        if self._consumed:
            raise StateError("cannot reuse a consumed tape")
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise StateError("tape stack corrupted: exiting a tape that is not current")
        stack.pop()

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn: Callable) -> None:
        self._nodes.append((out, inputs, backward_fn))
        self._produced.add(id(out))

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` on every requires_grad leaf reachable from ``loss``."""
        if self._consumed:
            raise StateError("tape already consumed by a previous backward pass")
        if id(loss) not in self._produced:
            raise StateError("loss was not produced under this tape")
        if loss.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
        self._consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for out, inputs, backward_fn in reversed(self._nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            input_grads = backward_fn(g)
            for t, ig in zip(inputs, input_grads):
                if ig is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
                if key not in self._produced:
                    leaves[key] = t
        for key, t in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            t.grad = g.copy() if t.grad is None else t.grad + g


def backward(loss: Tensor) -> None:
    """Run the backward pass of the tape that recorded ``loss``."""
    if loss.tape is None:
        raise StateError("loss was not produced under a live tape")
    loss.tape.backward(loss)


# --------------------------------------------------------------------------
# MAC instrumentation (used by the analyzer's cross-check)
# --------------------------------------------------------------------------


class MacCounter:
    """Accumulates multiply-accumulate counts of matmul/conv ops."""

    def __init__(self):
        self.total = 0


def _mac_counters() -> list[MacCounter]:
    counters = getattr(_LOCAL, "macs", None)
    if counters is None:
        counters = []
        _LOCAL.macs = counters
    return counters


class count_macs:
    """Context manager: ``with count_macs() as c: ...; c.total``."""

    def __enter__(self) -> MacCounter:
        counter = MacCounter()
        _mac_counters().append(counter)
        return counter

    def __exit__(self, exc_type, exc, tb) -> None:
        _mac_counters().pop()


def _add_macs(n: int) -> None:
    for counter in _mac_counters():
        counter.total += int(n)


# --------------------------------------------------------------------------
# Op plumbing
# --------------------------------------------------------------------------


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by {op}")


def _apply(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, backward_fn: Callable) -> Tensor:
    _check_finite(out_data, op)
    tape = _current_tape()
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs_grad)
    if needs_grad:
        out.tape = tape
        tape._record(out, inputs, backward_fn)
    return out


def _sum_to_suffix(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    return g


# --------------------------------------------------------------------------
# Elementwise and structural ops
# --------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    """Elementwise sum; ``b`` may also be a suffix of ``a``'s shape (bias,
    positional table, shared attention bias), broadcast over leading axes."""
    b = _as_tensor(b, a)
    if a.shape == b.shape:
        return _apply("add", (a, b), a.data + b.data, lambda g: (g, g))
    if a.ndim > b.ndim and a.shape[a.ndim - b.ndim :] == b.shape:
        bshape = b.shape
        return _apply("add", (a, b), a.data + b.data, lambda g: (g, _sum_to_suffix(g, bshape)))
    if b.ndim > a.ndim and b.shape[b.ndim - a.ndim :] == a.shape:
        ashape = a.shape
        return _apply("add", (a, b), a.data + b.data, lambda g: (_sum_to_suffix(g, ashape), g))
    raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    b = _as_tensor(b, a)
    if a.shape != b.shape:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    return _apply("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    b = _as_tensor(b, a)
    if a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _apply("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _apply("scale", (a,), a.data * s, lambda g: (g * s,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(d) for d in shape)
    in_shape = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {in_shape} as {shape}") from exc
    return _apply("reshape", (a,), out, lambda g: (g.reshape(in_shape),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(d) for d in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation of rank {a.ndim}")
    inverse = tuple(np.argsort(axes))
    return _apply("transpose", (a,), np.ascontiguousarray(a.data.transpose(axes)),
                  lambda g: (g.transpose(inverse),))


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    last = a.shape[-1]
    if not (0 <= start < stop <= last):
        raise ShapeError(f"slice_last: [{start}:{stop}] out of range for extent {last}")

    def bwd(g):
        full = np.zeros_like(a.data)
        full[..., start:stop] = g
        return (full,)

    return _apply("slice_last", (a,), np.ascontiguousarray(a.data[..., start:stop]), bwd)


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _apply("sum_all", (a,), np.asarray(a.data.sum(), dtype=a.data.dtype),
                  lambda g: (np.broadcast_to(g, shape).astype(a.data.dtype, copy=True),))


def sum_axis(a: Tensor, axis: int) -> Tensor:
    axis = axis % a.ndim
    shape = a.shape

    def bwd(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape).astype(g.dtype, copy=True),)

    return _apply("sum_axis", (a,), a.data.sum(axis=axis), bwd)


def mean_axis(a: Tensor, axis: int) -> Tensor:
    return scale(sum_axis(a, axis), 1.0 / a.shape[axis % a.ndim])


def gather_last(a: Tensor, index: np.ndarray) -> Tensor:
    """out[..., *index.shape] = a[..., index]; gradient scatter-adds into ``a``."""
    index = np.asarray(index, dtype=np.int64)
    last = a.shape[-1]
    if index.size and (index.min() < 0 or index.max() >= last):
        raise ShapeError(f"gather_last: index out of range for extent {last}")
    lead = a.shape[:-1]

    def bwd(g):
        ga = np.zeros_like(a.data).reshape(-1, last)
        gf = g.reshape(-1, index.size)
        idx = index.reshape(-1)
        for row in range(ga.shape[0]):
            np.add.at(ga[row], idx, gf[row])
        return (ga.reshape(a.shape),)

    return _apply("gather_last", (a,), a.data[..., index], bwd)


# --------------------------------------------------------------------------
# Linear algebra
# --------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product ``[..., m, k] @ [..., k, n]``.

    Leading axes must match exactly, or ``b`` may be a plain 2-d weight
    matrix shared over all leading axes of ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-d, got {a.shape} and {b.shape}")
    k = a.shape[-1]
    if b.shape[-2] != k:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if b.ndim == 2:
        out = ad @ bd
        _add_macs(out.size * k)

        def bwd(g):
            ga = g @ bd.T
            gb = ad.reshape(-1, k).T @ g.reshape(-1, bd.shape[1])
            return (ga, gb)

        return _apply("matmul", (a, b), out, bwd)
    if a.shape[:-2] == b.shape[:-2]:
        out = ad @ bd
        _add_macs(out.size * k)

        def bwd(g):
            ga = g @ bd.swapaxes(-1, -2)
            gb = ad.swapaxes(-1, -2) @ g
            return (ga, gb)

        return _apply("matmul", (a, b), out, bwd)
    raise ShapeError(f"matmul: leading axes differ, {a.shape} @ {b.shape}")


# --------------------------------------------------------------------------
# Nonlinearities and normalizations
# --------------------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis`` (max subtraction always on)."""
    axis = axis % x.ndim
    if not np.all(np.isfinite(x.data)):
        raise NumericError("non-finite input to softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _apply("softmax", (x,), out, bwd)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x) with the erf-based normal CDF."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = xd * cdf

    def bwd(g):
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
        return (g * (cdf + xd * pdf),)

    return _apply("gelu", (x,), out, bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last (channel) dimension, then apply the affine."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} do not match channels {c}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gamma.data + beta.data

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        gx = g * gamma.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return (dx, dgamma, dbeta)

    return _apply("layer_norm", (x, gamma, beta), out, bwd)


class BatchNormState:
    """Running statistics for batch normalization.

    Uninitialized until the first train-mode pass (or explicit seeding);
    eval mode before that raises StateError.
    """

    __slots__ = ("mean", "var")

    def __init__(self, mean: np.ndarray | None = None, var: np.ndarray | None = None):
        self.mean = mean
        self.var = var

    def seed_identity(self, channels: int, dtype=np.float32) -> "BatchNormState":
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        return self


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
               mode: str = "train", momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Channel-wise batch normalization over the N, H, W axes of an NHWC tensor.

    Train mode normalizes with batch statistics and updates the running
    stats in ``state`` (biased variance throughout). Eval mode requires
    initialized running stats.
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm expects an NHWC tensor, got shape {x.shape}")
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: affine shapes {gamma.shape}/{beta.shape} do not match channels {c}")
    if mode not in ("train", "eval"):
        raise ValidationError(f"batch_norm mode must be 'train' or 'eval', got {mode!r}")
    axes = (0, 1, 2)
    if mode == "train":
        mu = x.data.mean(axis=axes)
        centered = x.data - mu
        var = (centered * centered).mean(axis=axes)
        if state.mean is None:
            state.mean = mu.astype(x.data.dtype)
            state.var = var.astype(x.data.dtype)
        else:
            state.mean = (1.0 - momentum) * state.mean + momentum * mu
            state.var = (1.0 - momentum) * state.var + momentum * var
        inv = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv
        out = xhat * gamma.data + beta.data

        def bwd(g):
            dgamma = (g * xhat).sum(axis=axes)
            dbeta = g.sum(axis=axes)
            gx = g * gamma.data
            dx = inv * (gx - gx.mean(axis=axes, keepdims=True)
                        - xhat * (gx * xhat).mean(axis=axes, keepdims=True))
            return (dx, dgamma, dbeta)

        return _apply("batch_norm", (x, gamma, beta), out, bwd)

    if state.mean is None or state.var is None:
        raise StateError("batch_norm eval mode before any train step and without seeded stats")
    inv = 1.0 / np.sqrt(state.var + eps)
    xhat = (x.data - state.mean) * inv
    out = xhat * gamma.data + beta.data

    def bwd_eval(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        return (g * gamma.data * inv, dgamma, dbeta)

    return _apply("batch_norm", (x, gamma, beta), out, bwd_eval)


# --------------------------------------------------------------------------
# Convolution and sampling
# --------------------------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-d convolution of an NHWC input with a KxKxCinxCout kernel.

    Zero padding; output extents floor((H + 2*pad - K) / stride) + 1.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected NHWC input and KKCC kernel, got {x.shape} and {w.shape}")
    n, h, wd, cin = x.shape
    kh, kw, wcin, cout = w.shape
    if kh != kw:
        raise ShapeError(f"conv2d: kernel must be square, got {w.shape}")
    if wcin != cin:
        raise ShapeError(f"conv2d: input channels {cin} do not match kernel {w.shape}")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match output channels {cout}")
    k, s, p = kh, stride, padding
    hp, wp = h + 2 * p, wd + 2 * p
    ho, wo = (hp - k) // s + 1, (wp - k) // s + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {k} does not fit input {x.shape} with padding {p}")

    xp = x.data
    if p:
        xp = np.zeros((n, hp, wp, cin), dtype=x.data.dtype)
        xp[:, p:p + h, p:p + wd, :] = x.data
    patches = np.empty((n, ho, wo, k, k, cin), dtype=x.data.dtype)
    for ky in range(k):
        for kx in range(k):
            patches[:, :, :, ky, kx, :] = xp[:, ky:ky + s * ho:s, kx:kx + s * wo:s, :]
    cols = patches.reshape(n * ho * wo, k * k * cin)
    wmat = w.data.reshape(k * k * cin, cout)
    out = cols @ wmat
    _add_macs(out.size * k * k * cin)
    out = out.reshape(n, ho, wo, cout)
    if bias is not None:
        out = out + bias.data

    def bwd(g):
        gmat = g.reshape(n * ho * wo, cout)
        gw = (cols.T @ gmat).reshape(w.shape)
        gcols = (gmat @ wmat.T).reshape(n, ho, wo, k, k, cin)
        gxp = np.zeros((n, hp, wp, cin), dtype=g.dtype)
        for ky in range(k):
            for kx in range(k):
                gxp[:, ky:ky + s * ho:s, kx:kx + s * wo:s, :] += gcols[:, :, :, ky, kx, :]
        gx = gxp[:, p:p + h, p:p + wd, :] if p else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 1, 2)))
        return tuple(grads)

    inputs = (x, w) if bias is None else (x, w, bias)
    return _apply("conv2d", inputs, out, bwd)


def _corner_terms(y: np.ndarray, x: np.ndarray):
    y0 = np.floor(y)
    x0 = np.floor(x)
    wy1 = y - y0
    wx1 = x - x0
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)
    return y0, x0, wy1, wx1


def deform_sample(x: Tensor, positions: Tensor) -> Tensor:
    """Bilinear samples of an NHWC map at fractional positions.

    ``positions`` has shape [N, Ho, Wo, K, 2] with (y, x) in input pixel
    units; out-of-bounds neighbors contribute zero. Output is
    [N, Ho, Wo, K, C]. Differentiable in ``x`` and ``positions``.
    """
    if x.ndim != 4:
        raise ShapeError(f"deform_sample expects an NHWC tensor, got {x.shape}")
    if positions.ndim != 5 or positions.shape[-1] != 2 or positions.shape[0] != x.shape[0]:
        raise ShapeError(f"deform_sample: bad positions shape {positions.shape} for input {x.shape}")
    if not np.all(np.isfinite(positions.data)):
        raise NumericError("non-finite sampling positions")
    n, h, w, c = x.shape
    y0, x0, wy1, wx1 = _corner_terms(positions.data[..., 0], positions.data[..., 1])
    wy0, wx0 = 1.0 - wy1, 1.0 - wx1
    nidx = np.broadcast_to(np.arange(n).reshape(n, 1, 1, 1), y0.shape)

    def gather(cy, cx):
        valid = (cy >= 0) & (cy < h) & (cx >= 0) & (cx < w)
        vals = x.data[nidx, np.clip(cy, 0, h - 1), np.clip(cx, 0, w - 1), :]
        return vals * valid[..., None], valid

    v00, m00 = gather(y0, x0)
    v01, m01 = gather(y0, x0 + 1)
    v10, m10 = gather(y0 + 1, x0)
    v11, m11 = gather(y0 + 1, x0 + 1)
    out = ((wy0 * wx0)[..., None] * v00 + (wy0 * wx1)[..., None] * v01
           + (wy1 * wx0)[..., None] * v10 + (wy1 * wx1)[..., None] * v11)

    def bwd(g):
        gx = np.zeros_like(x.data)
        for cy, cx, mask, wgt in (
            (y0, x0, m00, wy0 * wx0),
            (y0, x0 + 1, m01, wy0 * wx1),
            (y0 + 1, x0, m10, wy1 * wx0),
            (y0 + 1, x0 + 1, m11, wy1 * wx1),
        ):
            contrib = g * (mask * wgt)[..., None]
            np.add.at(gx, (nidx, np.clip(cy, 0, h - 1), np.clip(cx, 0, w - 1)), contrib)
        dfdy = (v10 - v00) * wx0[..., None] + (v11 - v01) * wx1[..., None]
        dfdx = (v01 - v00) * wy0[..., None] + (v11 - v10) * wy1[..., None]
        gpos = np.stack(((g * dfdy).sum(axis=-1), (g * dfdx).sum(axis=-1)), axis=-1)
        return (gx, gpos)

    return _apply("deform_sample", (x, positions), out, bwd)


def bilinear_sample(x: Tensor, loc: Tensor) -> Tensor:
    """Bilinear interpolation of an HWC map at one fractional (y, x) point.

    Out-of-bounds neighbors contribute zero; differentiable in ``x`` and
    ``loc``.
    """
    if x.ndim != 3:
        raise ShapeError(f"bilinear_sample expects an HWC tensor, got {x.shape}")
    if loc.shape != (2,):
        raise ShapeError(f"bilinear_sample expects a (y, x) pair, got shape {loc.shape}")
    if not np.all(np.isfinite(loc.data)):
        raise NumericError("non-finite sampling location")
    h, w, c = x.shape
    y0f, x0f = math.floor(loc.data[0]), math.floor(loc.data[1])
    wy1 = float(loc.data[0] - y0f)
    wx1 = float(loc.data[1] - x0f)
    wy0, wx0 = 1.0 - wy1, 1.0 - wx1

    def pixel(cy, cx):
        if 0 <= cy < h and 0 <= cx < w:
            return x.data[cy, cx, :]
        return np.zeros(c, dtype=x.data.dtype)

    v00 = pixel(y0f, x0f)
    v01 = pixel(y0f, x0f + 1)
    v10 = pixel(y0f + 1, x0f)
    v11 = pixel(y0f + 1, x0f + 1)
    out = wy0 * wx0 * v00 + wy0 * wx1 * v01 + wy1 * wx0 * v10 + wy1 * wx1 * v11

    def bwd(g):
        gx = np.zeros_like(x.data)
        for cy, cx, wgt in ((y0f, x0f, wy0 * wx0), (y0f, x0f + 1, wy0 * wx1),
                            (y0f + 1, x0f, wy1 * wx0), (y0f + 1, x0f + 1, wy1 * wx1)):
            if 0 <= cy < h and 0 <= cx < w:
                gx[cy, cx, :] += wgt * g
        dfdy = (v10 - v00) * wx0 + (v11 - v01) * wx1
        dfdx = (v01 - v00) * wy0 + (v11 - v10) * wy1
        gloc = np.array([(g * dfdy).sum(), (g * dfdx).sum()], dtype=loc.data.dtype)
        return (gx, gloc)

    return _apply("bilinear_sample", (x, loc), out.astype(x.data.dtype), bwd)


# --------------------------------------------------------------------------
# Loss
# --------------------------------------------------------------------------


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of [N, K] logits against integer labels [N]."""
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects [N, K] logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ShapeError(f"labels out of range for {k} classes")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsumexp
    loss = -logp[np.arange(n), labels].mean()

    def bwd(g):
        probs = np.exp(logp)
        probs[np.arange(n), labels] -= 1.0
        return (g * probs / n,)

    return _apply("softmax_cross_entropy", (logits,),
                  np.asarray(loss, dtype=logits.data.dtype), bwd)
