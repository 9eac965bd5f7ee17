"""Differentiable operations on :class:`Tensor`.

Each function computes its forward result with numpy and registers a
backward closure on the tape.  Convolutions loop over kernel taps and run
one matrix product per tap, which keeps the working set to a single shifted
view of the input instead of a full im2col buffer.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import expit

from .core import (
    ConfigurationError,
    DimensionError,
    NumericDomainError,
    Tensor,
    as_tensor,
    record,
)

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


def _finite(kind: str, out: np.ndarray) -> np.ndarray:
    if not np.isfinite(out).all():
        raise FloatingPointError(f"{kind}: non-finite values in forward result")
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(kind: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{kind}: cannot broadcast {a.shape} with {b.shape}") from None


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.dtype)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(a, dtype=b.dtype)
    return as_tensor(a), as_tensor(b)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_broadcast("add", a, b)
    out = a.data + b.data
    return record("add", _finite("add", out), (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_broadcast("sub", a, b)
    out = a.data - b.data
    return record("sub", _finite("sub", out), (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data
    out = ad * bd
    return record("mul", _finite("mul", out), (a, b),
                  lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)))


def scale(x: Tensor, c: float) -> Tensor:
    out = x.data * x.data.dtype.type(c)
    return record("scale", _finite("scale", out), (x,), lambda g: (g * c,))


def power(x: Tensor, p: float) -> Tensor:
    """Elementwise ``x ** p`` for a scalar exponent."""
    xd = x.data
    out = xd ** p
    return record("power", _finite("power", out), (x,),
                  lambda g: (g * p * xd ** (p - 1),))


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return record("exp", _finite("exp", out), (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    if (xd <= 0).any():
        raise NumericDomainError("log: input contains non-positive values; clamp first")
    out = np.log(xd)
    return record("log", out, (x,), lambda g: (g / xd,))


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)
    return record("sigmoid", out, (x,), lambda g: (g * out * (1 - out),))


def softplus(x: Tensor) -> Tensor:
    """``log(1 + e^x)`` evaluated without overflow."""
    xd = x.data
    out = np.logaddexp(0, xd).astype(xd.dtype)
    return record("softplus", out, (x,), lambda g: (g * expit(xd),))


def relu(x: Tensor) -> Tensor:
    xd = x.data
    out = np.maximum(xd, 0)
    return record("relu", out, (x,), lambda g: (g * (xd > 0),))


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data
    inner = _SQRT_2_OVER_PI * (xd + _GELU_C * xd ** 3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1 + t)

    def back(g):
        d_inner = _SQRT_2_OVER_PI * (1 + 3 * _GELU_C * xd ** 2)
        return (g * (0.5 * (1 + t) + 0.5 * xd * (1 - t * t) * d_inner),)

    return record("gelu", _finite("gelu", out), (x,), back)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    xd = x.data
    out = np.clip(xd, lo, hi)
    inside = (xd >= lo) & (xd <= hi)
    return record("clamp", out, (x,), lambda g: (g * inside,))


def elementwise(x, kind: str, other=None, c: float | None = None) -> Tensor:
    """Dispatch by name: add, sub, mul, sigmoid, gelu, log, scale."""
    if kind in ("add", "sub", "mul"):
        return {"add": add, "sub": sub, "mul": mul}[kind](x, other)
    if kind == "scale":
        return scale(x, c)
    unary = {"sigmoid": sigmoid, "gelu": gelu, "log": log, "relu": relu,
             "exp": exp, "softplus": softplus}
    if kind not in unary:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    return unary[kind](x)


# ---------------------------------------------------------------------------
# reductions and index remapping
# ---------------------------------------------------------------------------

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    xd = x.data
    out = np.asarray(xd.sum(axis=axis, keepdims=keepdims), dtype=xd.dtype)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, xd.shape).copy(),)

    return record("sum", out, (x,), back)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if -1 not in shape and math.prod(shape) != x.size:
        raise DimensionError(f"reshape: cannot view {x.shape} ({x.size} elements) as {shape}")
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}") from None
    src = x.shape
    return record("reshape", out, (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"transpose: {axes} is not a permutation of {x.ndim} axes")
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return record("transpose", out, (x,),
                  lambda g: (np.ascontiguousarray(g.transpose(inverse)),))


def reshape_transpose(x: Tensor, shape=None, axes=None) -> Tensor:
    """Reshape, then optionally permute axes."""
    if shape is not None:
        x = reshape(x, shape)
    if axes is not None:
        x = transpose(x, axes)
    return x


def concat(xs, axis: int = 0) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    if len(xs) == 1:
        return xs[0]
    ref = xs[0].shape
    ax = axis % len(ref)
    for t in xs[1:]:
        if t.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != ax):
            raise DimensionError(
                f"concat: shapes {[t.shape for t in xs]} differ off axis {axis}")
    out = np.concatenate([t.data for t in xs], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in xs])

    def back(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=ax) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return record("concat", out, xs, back)


# ---------------------------------------------------------------------------
# linear algebra and normalization
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _coerce(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)

    def back(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2)) if a.requires_grad else None
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                # (..., M, K) x (K, N): fold the batch axes into M.
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), b.shape)
        else:
            gb = None
        if ga is not None:
            ga = _unbroadcast(ga, a.shape)
        return ga, gb

    return record("matmul", _finite("matmul", out), (a, b), back)


def softmax_scaled(scores: Tensor, scale_by: float) -> Tensor:
    """Row softmax of ``scores / scale_by`` along the last axis."""
    if scale_by <= 0:
        raise ConfigurationError(f"softmax_scaled: scale must be positive, got {scale_by}")
    z = scores.data / scores.data.dtype.type(scale_by)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return ((y * (g - (g * y).sum(axis=-1, keepdims=True))) / scale_by,)

    return record("softmax", y, (scores,), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis then apply the affine gain/bias."""
    if eps <= 0:
        raise ConfigurationError("layer_norm: eps must be positive")
    C = x.shape[-1]
    if gain.shape != (C,) or bias.shape != (C,):
        raise DimensionError(f"layer_norm: gain {gain.shape}/bias {bias.shape} vs features {C}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def back(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(xd.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return record("layer_norm", out.astype(xd.dtype, copy=False), (x, gain, bias), back)


# ---------------------------------------------------------------------------
# spatial operations
# ---------------------------------------------------------------------------

def conv_output_size(n: int, kernel: int, stride: int, padding: int, dilation: int = 1) -> int:
    """floor((n + 2P - r(E - 1) - 1) / S) + 1."""
    return (n + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def _check_conv(kind, H, W, E, stride, padding, dilation):
    if E < 1 or stride < 1 or dilation < 1 or padding < 0:
        raise ConfigurationError(
            f"{kind}: need E>=1, S>=1, r>=1, P>=0 (got E={E}, S={stride}, P={padding}, r={dilation})")
    Ho = conv_output_size(H, E, stride, padding, dilation)
    Wo = conv_output_size(W, E, stride, padding, dilation)
    if Ho <= 0 or Wo <= 0:
        raise ConfigurationError(
            f"{kind}: input {H}x{W} with E={E}, S={stride}, P={padding}, r={dilation} "
            f"gives output {Ho}x{Wo}")
    return Ho, Wo


def _tap(xp, ki, kj, dilation, stride, Ho, Wo):
    r0, c0 = ki * dilation, kj * dilation
    return xp[:, :, r0:r0 + stride * (Ho - 1) + 1:stride, c0:c0 + stride * (Wo - 1) + 1:stride]


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, dilation: int = 1) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``x`` is ``(C_in, H, W)`` or ``(B, C_in, H, W)``; ``w`` is
    ``(C_out, C_in, E, E)``.
    """
    squeeze = x.ndim == 3
    if x.ndim not in (3, 4) or w.ndim != 4:
        raise DimensionError(f"conv2d: expected x of rank 3/4 and w of rank 4, got {x.shape}, {w.shape}")
    xd = x.data[None] if squeeze else x.data
    B, Ci, H, W = xd.shape
    Co, Ci_w, E, E2 = w.shape
    if Ci_w != Ci or E != E2:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with weight {w.shape}")
    if bias is not None and bias.shape != (Co,):
        raise DimensionError(f"conv2d: bias {bias.shape} does not match {Co} output channels")
    Ho, Wo = _check_conv("conv2d", H, W, E, stride, padding, dilation)

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    wd = w.data
    # Tap-major contiguous copy so every per-tap product goes through BLAS.
    taps = np.ascontiguousarray(wd.transpose(2, 3, 0, 1))
    out = np.zeros((B, Co, Ho * Wo), dtype=xd.dtype)
    for ki in range(E):
        for kj in range(E):
            xs = _tap(xp, ki, kj, dilation, stride, Ho, Wo).reshape(B, Ci, Ho * Wo)
            out += np.matmul(taps[ki, kj], xs)
    out = out.reshape(B, Co, Ho, Wo)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def back(g):
        g = g[None] if squeeze else g
        g2 = g.reshape(B, Co, Ho * Wo)
        need_x, need_w = x.requires_grad, w.requires_grad
        dxp = np.zeros_like(xp) if need_x else None
        dtaps = np.zeros_like(taps) if need_w else None
        for ki in range(E):
            for kj in range(E):
                if need_w:
                    xs = _tap(xp, ki, kj, dilation, stride, Ho, Wo).reshape(B, Ci, Ho * Wo)
                    dtaps[ki, kj] = np.matmul(g2, np.swapaxes(xs, 1, 2)).sum(axis=0)
                if need_x:
                    view = _tap(dxp, ki, kj, dilation, stride, Ho, Wo)
                    view += np.matmul(taps[ki, kj].T, g2).reshape(B, Ci, Ho, Wo)
        dw = np.ascontiguousarray(dtaps.transpose(2, 3, 0, 1)) if need_w else None
        dx = None
        if need_x:
            dx = dxp[:, :, padding:padding + H, padding:padding + W] if padding else dxp
            dx = np.ascontiguousarray(dx[0] if squeeze else dx)
        grads = [dx, dw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    inputs = (x, w) if bias is None else (x, w, bias)
    return record("conv2d", _finite("conv2d", out[0] if squeeze else out), inputs, back)


def depthwise_conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1,
                     padding: int = 0, dilation: int = 1) -> Tensor:
    """Per-channel convolution; ``w`` is ``(C, E, E)``, ``x`` is ``(B, C, H, W)``."""
    if x.ndim != 4 or w.ndim != 3 or w.shape[0] != x.shape[1] or w.shape[1] != w.shape[2]:
        raise DimensionError(f"depthwise_conv2d: input {x.shape} incompatible with weight {w.shape}")
    xd = x.data
    B, C, H, W = xd.shape
    E = w.shape[1]
    Ho, Wo = _check_conv("depthwise_conv2d", H, W, E, stride, padding, dilation)
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    wd = w.data
    out = np.zeros((B, C, Ho, Wo), dtype=xd.dtype)
    for ki in range(E):
        for kj in range(E):
            out += wd[None, :, ki, kj, None, None] * _tap(xp, ki, kj, dilation, stride, Ho, Wo)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def back(g):
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(wd)
        for ki in range(E):
            for kj in range(E):
                xs = _tap(xp, ki, kj, dilation, stride, Ho, Wo)
                dw[:, ki, kj] = (g * xs).sum(axis=(0, 2, 3))
                view = _tap(dxp, ki, kj, dilation, stride, Ho, Wo)
                view += wd[None, :, ki, kj, None, None] * g
        dx = dxp[:, :, padding:padding + H, padding:padding + W] if padding else dxp
        grads = [np.ascontiguousarray(dx), dw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    inputs = (x, w) if bias is None else (x, w, bias)
    return record("depthwise_conv2d", _finite("depthwise_conv2d", out), inputs, back)


def max_pool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping ``k x k`` max pooling over the last two axes."""
    xd = x.data
    *lead, H, W = xd.shape
    if H % k or W % k:
        raise ConfigurationError(f"max_pool2d: spatial size {H}x{W} not divisible by {k}")
    win = xd.reshape(*lead, H // k, k, W // k, k)
    win = np.moveaxis(win, -3, -2).reshape(*lead, H // k, W // k, k * k)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def back(g):
        gw = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gw = gw.reshape(*lead, H // k, W // k, k, k)
        gw = np.moveaxis(gw, -2, -3).reshape(*lead, H, W)
        return (gw,)

    return record("max_pool2d", np.ascontiguousarray(out), (x,), back)


def interp_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Linear interpolation weights (half-pixel centres, edge-clamped)."""
    A = np.zeros((n_out, n_in), dtype=dtype)
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = src - i0
    rows = np.arange(n_out)
    np.add.at(A, (rows, i0), 1 - frac)
    np.add.at(A, (rows, i1), frac)
    return A


def bilinear_resize(x: Tensor, target: tuple[int, int]) -> Tensor:
    """Resize the last two axes to ``target``."""
    Ht, Wt = (int(v) for v in target)
    if Ht < 1 or Wt < 1:
        raise ConfigurationError(f"bilinear_resize: target {target} must be positive")
    H, W = x.shape[-2:]
    if (H, W) == (Ht, Wt):
        return x
    Ah = interp_matrix(H, Ht, x.dtype)
    Aw = interp_matrix(W, Wt, x.dtype)
    out = np.matmul(np.matmul(Ah, x.data), Aw.T)
    return record("bilinear_resize", out, (x,),
                  lambda g: (np.matmul(np.matmul(Ah.T, g), Aw),))
