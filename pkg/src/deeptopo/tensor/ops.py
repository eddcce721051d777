"""Differentiable operators.

Image operators take ``C×H×W`` or a batched ``N×C×H×W`` layout; the
batch dimension is optional everywhere and the per-image form is the
documented contract.

Coordinate convention (used by :func:`bilinear_sample`,
:func:`bilinear_upsample_x2` and the warped convolution): pixel centres sit
at integer ``(row, col)`` coordinates with ``(0, 0)`` the top-left pixel.
Upsampling by two maps output index ``u`` to input coordinate ``u / 2``, so
even output indices land exactly on input pixel centres; positions past the
last centre are clamped to the edge pixel.
"""
from __future__ import annotations

import math
from typing import Mapping, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import Tensor, as_tensor, branch, make_result


# ---------------------------------------------------------------------------
# helpers


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


MIX_ALIGN = 16


def channel_mix(w: np.ndarray, x: np.ndarray) -> np.ndarray:
    """``w @ x[i]`` for every leading index of ``x`` (``… × C_in × P``).

    The trailing axis is zero-padded to a multiple of ``MIX_ALIGN`` so every
    column goes through the same GEMM micro-kernel; each output column then
    has the same rounding no matter where it sits, which keeps rotated or
    permuted inputs bit-exact.
    """
    p = x.shape[-1]
    pad = (-p) % MIX_ALIGN
    if pad:
        x = np.concatenate([x, np.zeros(x.shape[:-1] + (pad,), dtype=x.dtype)], axis=-1)
        return np.matmul(w, x)[..., :p]
    return np.matmul(w, x)


def _to_batched(x: Tensor, ndim: int) -> tuple[Tensor, bool]:
    if x.ndim == ndim - 1:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != ndim:
        raise ValueError(f"expected a {ndim - 1}-d or {ndim}-d tensor, got shape {x.shape}")
    return x, False


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make_result(
        a.data + b.data, (a, b), "add",
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make_result(
        a.data - b.data, (a, b), "sub",
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return make_result(
        a.data * b.data, (a, b), "mul",
        lambda g: (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        ),
    )


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data
    return make_result(
        out, (a, b), "div",
        lambda g: (
            _unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None,
        ),
    )


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), "neg", lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    return make_result(
        a.data ** exponent, (a,), "pow",
        lambda g: (g * exponent * a.data ** (exponent - 1),),
    )


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result(out, (a,), "exp", lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return make_result(np.log(a.data), (a,), "log", lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return make_result(out, (a,), "sqrt", lambda g: (g * 0.5 / out,))


def relu(a: Tensor) -> Tensor:
    mask = branch(a.data > 0)
    return make_result(np.where(mask, a.data, 0).astype(a.dtype), (a,), "relu",
                       lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so neither branch overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(a.dtype)
    return make_result(out, (a,), "sigmoid", lambda g: (g * out * (1 - out),))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    return make_result(out, (a,), "softplus", lambda g: (g * _sigmoid_np(x),))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(inner)
    out = 0.5 * x * (1 + t)

    def bw(g):
        dinner = _GELU_C * (1 + 3 * 0.044715 * (x * x))
        return (g * (0.5 * (1 + t) + 0.5 * x * (1 - t * t) * dinner),)

    return make_result(out, (a,), "gelu", bw)


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_result(np.asarray(out), (a,), "sum", bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[i] for i in axes]))
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return make_result(np.asarray(out), (a,), "mean", bw)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return make_result(a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return make_result(
        np.ascontiguousarray(a.data.transpose(axes)), (a,), "transpose",
        lambda g: (g.transpose(inv),),
    )


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    return make_result(
        np.broadcast_to(a.data, shape).copy(), (a,), "broadcast_to",
        lambda g: (_unbroadcast(g, a.shape),),
    )


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(None))) or i is Ellipsis for i in items)


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]
    basic = _is_basic_index(index)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return make_result(np.array(out, copy=True), (a,), "getitem", bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return make_result(out, tensors, "concat", lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return make_result(
        out, tensors, "stack",
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)),
    )


def take_tokens(x: Tensor, index: np.ndarray) -> Tensor:
    """Gather rows along axis 1: ``x`` is ``B×N×D``, ``index`` is ``B×K`` ints."""
    index = np.asarray(index)
    B, N, D = x.shape
    out = np.take_along_axis(x.data, index[:, :, None], axis=1)

    def bw(g):
        full = np.zeros_like(x.data)
        flat = (index + np.arange(B)[:, None] * N).reshape(-1)
        np.add.at(full.reshape(B * N, D), flat, g.reshape(-1, D))
        return (full,)

    return make_result(out, (x,), "take_tokens", bw)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return make_result(out, (a, b), "matmul", bw)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map over the last axis: ``x @ weight.T + bias``.

    ``weight`` is ``D_out×D_in``; leading axes of ``x`` are treated as batch.
    """
    d_out, d_in = weight.shape
    if x.shape[-1] != d_in:
        raise ValueError(
            f"linear: input last dimension {x.shape[-1]} does not match weight in-dimension {d_in}"
        )
    if bias is not None and bias.shape != (d_out,):
        raise ValueError(f"linear: bias shape {bias.shape} does not match out-dimension {d_out}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, d_in)
    out = x2 @ weight.data.T
    if bias is not None:
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(-1, d_out)
        gx = (g2 @ weight.data).reshape(x.shape) if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return make_result(out.reshape(lead + (d_out,)), inputs, "linear", bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), "softmax", bw)


# ---------------------------------------------------------------------------
# normalisation


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * weight.data + bias.data
    n = x.shape[-1]

    def bw(g):
        gxhat = g * weight.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True) / n)
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_result(out, (x, weight, bias), "layer_norm", bw)


def batch_norm_2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalisation.

    Train mode normalises with the batch statistics over (N, H, W) and
    updates ``running_mean``/``running_var`` in place (unbiased variance for
    the running estimate). Eval mode uses the running estimates.
    """
    x4, squeeze = _to_batched(x, 4)
    data = x4.data
    axes = (0, 2, 3)
    count = data.shape[0] * data.shape[2] * data.shape[3]
    if training:
        mu = data.mean(axis=axes)
        xc = data - mu[None, :, None, None]
        var = (xc * xc).mean(axis=axes)
        unbiased = var * count / max(count - 1, 1)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        mu = running_mean.astype(data.dtype)
        var = running_var.astype(data.dtype)
        xc = data - mu[None, :, None, None]
    inv = (1.0 / np.sqrt(var + eps)).astype(data.dtype)
    xhat = xc * inv[None, :, None, None]
    out = xhat * weight.data[None, :, None, None] + bias.data[None, :, None, None]

    def bw(g):
        gw = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gxhat = g * weight.data[None, :, None, None]
        if training:
            gx = inv[None, :, None, None] * (
                gxhat
                - gxhat.mean(axis=axes, keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True)
            )
        else:
            gx = gxhat * inv[None, :, None, None]
        return gx, gw, gb

    out_t = make_result(out, (x4, weight, bias), "batch_norm_2d", bw)
    return reshape(out_t, x.shape) if squeeze else out_t


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the two trailing spatial axes: ``C×H×W -> C``."""
    return mean(x, axis=(-2, -1))


# ---------------------------------------------------------------------------
# convolution


def _check_kernel(k: int) -> None:
    if k % 2 != 1:
        raise ValueError(f"kernel size must be odd, got {k}")


def _correlate(xp: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Valid stride-1 cross-correlation of a padded batch; returns ``N×C_out×(H'·W')``.

    Uses one GEMM over the image followed by k² shifted adds when the input
    is at least as wide as the output, and im2col otherwise; whichever
    materialises fewer values.
    """
    n, c, hp, wp = xp.shape
    c_out, _, k, _ = w.shape
    ho, wo = hp - k + 1, wp - k + 1
    if c >= c_out:
        wt = w.transpose(2, 3, 0, 1).reshape(k * k * c_out, c)
        y = channel_mix(wt, xp.reshape(n, c, hp * wp)).reshape(n, k, k, c_out, hp, wp)
        out = np.ascontiguousarray(y[:, 0, 0, :, :ho, :wo])
        for i in range(k):
            for j in range(k):
                if i or j:
                    out += y[:, i, j, :, i:i + ho, j:j + wo]
        return out.reshape(n, c_out, ho * wo)
    cols = np.empty((n, c, k, k, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i:i + ho, j:j + wo]
    return channel_mix(w.reshape(c_out, c * k * k), cols.reshape(n, c * k * k, ho * wo))


def _correlate_wgrad(xp: np.ndarray, g: np.ndarray, k: int) -> np.ndarray:
    """Weight gradient of :func:`_correlate` given the output gradient ``g``."""
    n, c, hp, wp = xp.shape
    c_out, ho, wo = g.shape[1:]
    if c_out <= c:
        # place g at every tap offset on the padded grid, then one GEMM against x
        ge = np.zeros((n, k, k, c_out, hp, wp), dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                ge[:, i, j, :, i:i + ho, j:j + wo] = g
        r = np.matmul(ge.reshape(n, k * k * c_out, hp * wp), xp.reshape(n, c, hp * wp).transpose(0, 2, 1))
        return np.ascontiguousarray(r.sum(axis=0).reshape(k, k, c_out, c).transpose(2, 3, 0, 1))
    g3 = g.reshape(n, c_out, ho * wo)
    gw = np.empty((c_out, c, k, k), dtype=g.dtype)
    for i in range(k):
        for j in range(k):
            xs = np.ascontiguousarray(xp[:, :, i:i + ho, j:j + wo]).reshape(n, c, ho * wo)
            gw[:, :, i, j] = np.matmul(g3, xs.transpose(0, 2, 1)).sum(axis=0)
    return gw


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """Cross-correlation with zero padding.

    ``x``: ``C_in×H×W`` (or batched), ``weight``: ``C_out×C_in×k×k``.
    """
    x4, squeeze = _to_batched(x, 4)
    if weight.ndim != 4:
        raise ValueError(f"conv2d: weight must be 4-d C_out×C_in×k×k, got shape {weight.shape}")
    c_out, c_in, kh, kw = weight.shape
    if kh != kw:
        raise ValueError(f"conv2d: kernel height {kh} != kernel width {kw}")
    _check_kernel(kh)
    if padding < 0:
        raise ValueError("conv2d: padding must be >= 0")
    if stride < 1:
        raise ValueError("conv2d: stride must be >= 1")
    n, c, h, w = x4.shape
    if c != c_in:
        raise ValueError(f"conv2d: input channel dimension {c} does not match weight C_in {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise ValueError(f"conv2d: bias dimension {bias.shape} does not match C_out {c_out}")
    k = kh
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv2d: spatial size {h}×{w} too small for kernel {k} and padding {padding}")

    w2 = weight.data.reshape(c_out, c * k * k)
    pointwise = k == 1 and stride == 1 and padding == 0
    cols = xp = None
    if pointwise:
        cols = x4.data.reshape(n, c, h * w)
        out = channel_mix(w2, cols)
    elif stride == 1:
        xp = np.pad(x4.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        out = _correlate(xp, weight.data)
    else:
        xp = np.pad(x4.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
        cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * k * k, ho * wo)
        out = channel_mix(w2, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(n, c_out, ho, wo)
    inputs = (x4, weight) if bias is None else (x4, weight, bias)

    def bw(g):
        g3 = g.reshape(n, c_out, ho * wo)
        gw = gx = None
        if weight.requires_grad:
            if cols is not None:
                gw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
            else:
                gw = _correlate_wgrad(xp, g, k)
        if x4.requires_grad:
            if pointwise:
                gx = channel_mix(w2.T, g3).reshape(x4.shape)
            elif stride == 1 and padding <= k - 1:
                # full correlation of g with the flipped, transposed kernel
                q = k - 1 - padding
                gp = np.pad(g, ((0, 0), (0, 0), (q, q), (q, q)))
                wf = np.ascontiguousarray(weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
                gx = _correlate(gp, wf).reshape(x4.shape)
            else:
                gcols = channel_mix(w2.T, g3).reshape(n, c, k, k, ho, wo)
                gxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=g.dtype)
                for i in range(k):
                    for j in range(k):
                        gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, i, j]
                gx = gxp[:, :, padding:padding + h, padding:padding + w]
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    res = make_result(out, inputs, "conv2d", bw)
    return reshape(res, res.shape[1:]) if squeeze else res


def depthwise_conv2d(
    x: Tensor,
    weight: Tensor,
    padding: Optional[int] = None,
    taps: Optional[Sequence[tuple[int, int]]] = None,
) -> Tensor:
    """Same-size per-channel cross-correlation.

    ``weight`` is ``C×k×k``. ``taps`` optionally restricts the sum to the
    given ``(row, col)`` offsets from the kernel centre; weights at all other
    offsets are then treated as zero and receive zero gradient.
    """
    x4, squeeze = _to_batched(x, 4)
    if weight.ndim != 3:
        raise ValueError(f"depthwise_conv2d: weight must be C×k×k, got shape {weight.shape}")
    c, k, k2 = weight.shape
    if k != k2:
        raise ValueError(f"depthwise_conv2d: kernel {k}×{k2} is not square")
    _check_kernel(k)
    r = k // 2
    if padding is None:
        padding = r
    if padding != r:
        raise ValueError(f"depthwise_conv2d: padding must be (k-1)/2 = {r}, got {padding}")
    n, cx, h, w = x4.shape
    if cx != c:
        raise ValueError(f"depthwise_conv2d: input has {cx} channels but weight has {c}")
    if taps is None:
        taps = [(i - r, j - r) for i in range(k) for j in range(k)]
    taps = list(taps)
    xp = np.pad(x4.data, ((0, 0), (0, 0), (r, r), (r, r)))
    wd = weight.data
    out = np.zeros_like(x4.data)
    for dr, dc in taps:
        out += wd[None, :, r + dr, r + dc, None, None] * xp[:, :, r + dr:r + dr + h, r + dc:r + dc + w]

    def bw(g):
        gx = gw = None
        if weight.requires_grad:
            gw = np.zeros_like(wd)
            for dr, dc in taps:
                gw[:, r + dr, r + dc] = (g * xp[:, :, r + dr:r + dr + h, r + dc:r + dc + w]).sum(axis=(0, 2, 3))
        if x4.requires_grad:
            gxp = np.zeros_like(xp)
            for dr, dc in taps:
                gxp[:, :, r + dr:r + dr + h, r + dc:r + dc + w] += wd[None, :, r + dr, r + dc, None, None] * g
            gx = gxp[:, :, r:r + h, r:r + w]
        return gx, gw

    res = make_result(out, (x4, weight), "depthwise_conv2d", bw)
    return reshape(res, res.shape[1:]) if squeeze else res


# ---------------------------------------------------------------------------
# sampling


def bilinear_sample(x: Tensor, coords: Tensor) -> Tensor:
    """Bilinear read of ``x`` at continuous ``(row, col)`` coordinates.

    ``x``: ``C×H×W`` with ``coords``: ``M×2`` gives ``C×M``; the batched form
    takes ``N×C×H×W`` and ``N×M×2`` and gives ``N×C×M``. Pixels outside the
    image read as zero.
    """
    coords = as_tensor(coords)
    x4, squeeze = _to_batched(x, 4)
    c3 = coords
    if coords.ndim == 2:
        c3 = reshape(coords, (1,) + coords.shape)
    if c3.ndim != 3 or c3.shape[-1] != 2:
        raise ValueError(f"bilinear_sample: coords must be M×2 (or N×M×2), got {coords.shape}")
    n, c, h, w = x4.shape
    if c3.shape[0] != n:
        raise ValueError(f"bilinear_sample: batch {n} vs coords batch {c3.shape[0]}")
    cd = c3.data
    if not np.all(np.isfinite(cd)):
        raise ValueError("bilinear_sample: coordinates must be finite")
    y, xq = cd[..., 0], cd[..., 1]
    y0 = branch(np.floor(y))
    x0 = branch(np.floor(xq))
    fy = (y - y0).astype(x4.dtype)
    fx = (xq - x0).astype(x4.dtype)
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)
    m = cd.shape[1]
    flat = x4.data.reshape(n, c, h * w)

    corners = {}
    for dy in (0, 1):
        for dx in (0, 1):
            yi = y0 + dy
            xi = x0 + dx
            valid = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
            lin = np.where(valid, yi * w + xi, 0)
            vals = np.take_along_axis(flat, lin[:, None, :], axis=2) * valid[:, None, :]
            corners[dy, dx] = (lin, valid, vals)
    v00, v01 = corners[0, 0][2], corners[0, 1][2]
    v10, v11 = corners[1, 0][2], corners[1, 1][2]
    wy = (1 - fy)[:, None, :], fy[:, None, :]
    wx = (1 - fx)[:, None, :], fx[:, None, :]
    out = wy[0] * (wx[0] * v00 + wx[1] * v01) + wy[1] * (wx[0] * v10 + wx[1] * v11)

    def bw(g):
        gx = gc = None
        if x4.requires_grad:
            gflat = np.zeros(n * c * h * w, dtype=g.dtype)
            base = (np.arange(n)[:, None, None] * c + np.arange(c)[None, :, None]) * (h * w)
            for (dy, dx), (lin, valid, _) in corners.items():
                wgt = wy[dy] * wx[dx] * valid[:, None, :]
                idx = base + lin[:, None, :]
                gflat += np.bincount(idx.reshape(-1), weights=(g * wgt).reshape(-1), minlength=gflat.size)
            gx = gflat.reshape(x4.shape)
        if c3.requires_grad:
            d_y = wx[0] * (v10 - v00) + wx[1] * (v11 - v01)
            d_x = wy[0] * (v01 - v00) + wy[1] * (v11 - v10)
            gc = np.stack([(g * d_y).sum(axis=1), (g * d_x).sum(axis=1)], axis=-1)
        return gx, gc

    res = make_result(out, (x4, c3), "bilinear_sample", bw)
    if squeeze:
        return reshape(res, (c, m))
    return res


def _upsample_axis(a: np.ndarray, axis: int) -> np.ndarray:
    n = a.shape[axis]
    a = np.moveaxis(a, axis, -1)
    nxt = np.concatenate([a[..., 1:], a[..., -1:]], axis=-1)
    out = np.empty(a.shape[:-1] + (2 * n,), dtype=a.dtype)
    out[..., 0::2] = a
    out[..., 1::2] = 0.5 * (a + nxt)
    return np.moveaxis(out, -1, axis)


def _upsample_axis_grad(g: np.ndarray, axis: int) -> np.ndarray:
    g = np.moveaxis(g, axis, -1)
    even = g[..., 0::2]
    odd = 0.5 * g[..., 1::2]
    ga = even + odd
    ga[..., 1:] += odd[..., :-1]
    ga[..., -1] += odd[..., -1]
    return np.moveaxis(ga, -1, axis)


def bilinear_upsample_x2(x: Tensor) -> Tensor:
    """Double both spatial extents with the centre-aligned mapping (module docstring)."""
    out = _upsample_axis(_upsample_axis(x.data, -1), -2)

    def bw(g):
        return (_upsample_axis_grad(_upsample_axis_grad(g, -2), -1),)

    return make_result(out, (x,), "bilinear_upsample_x2", bw)


# ---------------------------------------------------------------------------
# transformer block


def attention_weights(tokens: Tensor, heads: int, params: Mapping[str, Tensor]) -> tuple[Tensor, Tensor]:
    """Multi-head self-attention on the pre-normalised tokens.

    Returns ``(attn_out, probabilities)``; ``probabilities`` is ``…×heads×N×N``.
    """
    *lead, n, d = tokens.shape
    hd = d // heads
    qkv = linear(tokens, params["attn.qkv.weight"], params["attn.qkv.bias"])
    qkv = reshape(qkv, tuple(lead) + (n, 3, heads, hd))
    nl = len(lead)
    perm = (nl + 1,) + tuple(range(nl)) + (nl + 2, nl, nl + 3)
    qkv = transpose(qkv, perm)  # 3 × … × heads × N × hd
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = matmul(q, transpose(k, tuple(range(nl + 1)) + (nl + 2, nl + 1))) * (1.0 / math.sqrt(hd))
    probs = softmax(scores, axis=-1)
    ctx = matmul(probs, v)  # … × heads × N × hd
    ctx = transpose(ctx, tuple(range(nl)) + (nl + 1, nl, nl + 2))
    ctx = reshape(ctx, tuple(lead) + (n, d))
    return linear(ctx, params["attn.proj.weight"], params["attn.proj.bias"]), probs


def attention_block(tokens: Tensor, heads: int, params: Mapping[str, Tensor]) -> Tensor:
    """Pre-norm transformer block: ``x + MHSA(LN(x))`` then ``x + FFN(LN(x))``."""
    d = tokens.shape[-1]
    if heads < 1 or d % heads:
        raise ValueError(f"attention_block: token dimension {d} is not divisible by heads={heads}")
    h = layer_norm(tokens, params["norm1.weight"], params["norm1.bias"])
    attn, _ = attention_weights(h, heads, params)
    x = tokens + attn
    h = layer_norm(x, params["norm2.weight"], params["norm2.bias"])
    h = linear(gelu(linear(h, params["mlp.fc1.weight"], params["mlp.fc1.bias"])),
               params["mlp.fc2.weight"], params["mlp.fc2.bias"])
    return x + h
