"""Forward and backward numeric kernels for every operator in the network.

All functions take and return NCHW numpy arrays and never modify their
arguments.  The heavy loops (im2col/col2im, max pooling, nearest upsampling)
are dispatched through :mod:`esanet.kernels.backend`.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from ..errors import ConfigurationError, DegenerateVarianceError, FactorViolationError
from ..tensor import ConvSpec, conv_out_extent
from . import backend

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _check_vec(v, c, what):
    v = np.asarray(v)
    if v.shape != (c,):
        raise ConfigurationError(f"{what} must have shape ({c},), got {v.shape}")
    return v


# ---------------------------------------------------------------- convolution

def _is_depthwise(spec: ConvSpec) -> bool:
    return spec.groups == spec.in_channels == spec.out_channels and spec.groups > 1


def _check_conv(x, w, b, spec: ConvSpec):
    if x.ndim != 4:
        raise ConfigurationError(f"conv input must be 4-D, got {x.shape}")
    if tuple(w.shape) != spec.weight_shape:
        raise ConfigurationError(
            f"conv weight shape {tuple(w.shape)} does not match spec {spec.weight_shape}")
    if b is not None and np.shape(b) != (spec.out_channels,):
        raise ConfigurationError(f"conv bias must have shape ({spec.out_channels},)")
    return spec.output_shape(x.shape)


def _depthwise_forward(x, w, spec, ho, wo):
    xp = np.pad(x, ((0, 0), (0, 0), (spec.pad_h, spec.pad_h), (spec.pad_w, spec.pad_w)))
    out = np.zeros((x.shape[0], x.shape[1], ho, wo), dtype=x.dtype)
    sh, sw = spec.stride_h, spec.stride_w
    for i in range(spec.kernel_h):
        for j in range(spec.kernel_w):
            out += w[None, :, 0, i, j, None, None] * \
                xp[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw]
    return out


def conv2d_forward(x, w, b, spec: ConvSpec):
    """Convolution (cross-correlation) returning ``(out, saved)``.

    ``saved`` holds the im2col columns per group so the backward pass does
    not recompute them; it is ``None`` for the depthwise path.
    """
    n, cout, ho, wo = _check_conv(x, w, b, spec)
    if _is_depthwise(spec):
        out = _depthwise_forward(x, w, spec, ho, wo)
        saved = None
    else:
        g = spec.groups
        cin_g, cout_g = spec.in_channels // g, cout // g
        args = (spec.kernel_h, spec.kernel_w, spec.stride_h, spec.stride_w,
                spec.pad_h, spec.pad_w, ho, wo)
        saved = []
        outs = []
        for gi in range(g):
            xg = x if g == 1 else np.ascontiguousarray(x[:, gi * cin_g:(gi + 1) * cin_g])
            cols = backend.impl.im2col(xg, *args)
            wg = w[gi * cout_g:(gi + 1) * cout_g].reshape(cout_g, -1)
            outs.append(wg @ cols)
            saved.append(cols)
        res = outs[0] if g == 1 else np.concatenate(outs, axis=0)
        out = np.ascontiguousarray(res.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3))
    if b is not None:
        out += b.reshape(1, -1, 1, 1).astype(out.dtype, copy=False)
    return out, saved


def conv2d(x, w, b=None, spec: ConvSpec | None = None, act: str | None = None):
    """2-D convolution with zero padding.  ``act='relu'`` applies a fused ReLU."""
    if spec is None:
        spec = ConvSpec(x.shape[1], w.shape[0], w.shape[2], w.shape[3],
                        groups=x.shape[1] // w.shape[1], has_bias=b is not None)
    out, _ = conv2d_forward(x, w, b, spec)
    if act == "relu":
        np.maximum(out, 0, out=out)
    elif act is not None:
        raise ConfigurationError(f"unknown fused activation {act!r}")
    return out


def conv2d_backward(grad, x, w, spec: ConvSpec, saved=None, need_dx=True):
    """Gradients ``(dx, dw, db)`` of a convolution given the output gradient."""
    n, cout, ho, wo = grad.shape
    db = grad.sum(axis=(0, 2, 3))
    if _is_depthwise(spec):
        sh, sw = spec.stride_h, spec.stride_w
        ph, pw = spec.pad_h, spec.pad_w
        xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
        dw = np.empty_like(w)
        dxp = np.zeros_like(xp) if need_dx else None
        for i in range(spec.kernel_h):
            for j in range(spec.kernel_w):
                sl = (slice(None), slice(None),
                      slice(i, i + sh * (ho - 1) + 1, sh), slice(j, j + sw * (wo - 1) + 1, sw))
                dw[:, 0, i, j] = (grad * xp[sl]).sum(axis=(0, 2, 3))
                if need_dx:
                    dxp[sl] += grad * w[None, :, 0, i, j, None, None]
        dx = np.ascontiguousarray(dxp[:, :, ph:ph + x.shape[2], pw:pw + x.shape[3]]) \
            if need_dx else None
        return dx, dw, db
    g = spec.groups
    cin_g, cout_g = spec.in_channels // g, cout // g
    args = (spec.kernel_h, spec.kernel_w, spec.stride_h, spec.stride_w,
            spec.pad_h, spec.pad_w, ho, wo)
    gmat = grad.transpose(1, 0, 2, 3).reshape(cout, n * ho * wo)
    dw = np.empty_like(w)
    dxs = []
    for gi in range(g):
        if saved is not None:
            cols = saved[gi]
        else:
            xg = np.ascontiguousarray(x[:, gi * cin_g:(gi + 1) * cin_g])
            cols = backend.impl.im2col(xg, *args)
        gg = gmat[gi * cout_g:(gi + 1) * cout_g]
        dw[gi * cout_g:(gi + 1) * cout_g] = (gg @ cols.T).reshape(cout_g, *w.shape[1:])
        if need_dx:
            wg = w[gi * cout_g:(gi + 1) * cout_g].reshape(cout_g, -1)
            dcols = wg.T @ gg
            xshape = (n, cin_g, x.shape[2], x.shape[3])
            dxs.append(backend.impl.col2im(dcols, xshape, *args))
    dx = None
    if need_dx:
        dx = dxs[0] if g == 1 else np.concatenate(dxs, axis=1)
    return dx, dw, db


# ---------------------------------------------------------------- batch norm

def batchnorm_infer(x, gamma, beta, running_mean, running_var, eps=BN_EPS):
    c = x.shape[1]
    gamma, beta = _check_vec(gamma, c, "gamma"), _check_vec(beta, c, "beta")
    mean, var = _check_vec(running_mean, c, "running_mean"), _check_vec(running_var, c, "running_var")
    if np.any(var < 0):
        raise ConfigurationError("running_var must be non-negative")
    scale = (gamma / np.sqrt(var + eps)).astype(x.dtype)
    shift = (beta - mean * scale).astype(x.dtype)
    return x * scale.reshape(1, c, 1, 1) + shift.reshape(1, c, 1, 1)


def batch_stats(x):
    """Per-channel mean and biased variance over (N, H, W)."""
    n, c, h, w = x.shape
    if n * h * w < 2:
        raise DegenerateVarianceError(
            f"batch statistics need >= 2 elements per channel, got {n * h * w}")
    mean = x.mean(axis=(0, 2, 3))
    var = ((x - mean.reshape(1, c, 1, 1)) ** 2).mean(axis=(0, 2, 3))
    return mean, var


def batchnorm_train(x, gamma, beta, running_mean, running_var, eps=BN_EPS,
                    momentum=BN_MOMENTUM):
    """Training-mode batch norm.

    Returns ``(y, (new_running_mean, new_running_var), (batch_mean, batch_var))``.
    """
    c = x.shape[1]
    gamma, beta = _check_vec(gamma, c, "gamma"), _check_vec(beta, c, "beta")
    mean, var = batch_stats(x)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
    y = xhat * gamma.reshape(1, c, 1, 1) + beta.reshape(1, c, 1, 1)
    new_mean = (1 - momentum) * np.asarray(running_mean) + momentum * mean
    new_var = (1 - momentum) * np.asarray(running_var) + momentum * var
    return y.astype(x.dtype, copy=False), (new_mean, new_var), (mean, var)


def batchnorm_train_backward(grad, x, gamma, mean, var, eps=BN_EPS):
    c = x.shape[1]
    m = x.shape[0] * x.shape[2] * x.shape[3]
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
    dbeta = grad.sum(axis=(0, 2, 3))
    dgamma = (grad * xhat).sum(axis=(0, 2, 3))
    dx = (gamma * inv / m).reshape(1, c, 1, 1) * (
        m * grad - dbeta.reshape(1, c, 1, 1) - xhat * dgamma.reshape(1, c, 1, 1))
    return dx.astype(x.dtype, copy=False), dgamma, dbeta


# ---------------------------------------------------------------- elementwise

def relu(x):
    return np.maximum(x, 0)


def relu_backward(grad, x):
    return grad * (x > 0)


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def add(x, y):
    if x.shape != y.shape:
        raise ConfigurationError(f"add shape mismatch {x.shape} vs {y.shape}")
    return x + y


def concat_channels(xs):
    xs = list(xs)
    if not xs:
        raise ConfigurationError("concat needs at least one tensor")
    ref = xs[0].shape
    for t in xs[1:]:
        if t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ConfigurationError(f"concat shape mismatch {ref} vs {t.shape}")
    return np.concatenate(xs, axis=1)


def scale_channels(x, gate):
    """Multiply each channel of ``x`` by ``gate`` of shape (N, C, 1, 1)."""
    if gate.shape != (x.shape[0], x.shape[1], 1, 1):
        raise ConfigurationError(f"gate shape {gate.shape} does not match {x.shape}")
    return x * gate


# ---------------------------------------------------------------- pooling

def pool_out_hw(h, w, wh, ww, sh, sw, ph=0, pw=0):
    ho, wo = conv_out_extent(h, wh, sh, ph), conv_out_extent(w, ww, sw, pw)
    if ho < 1 or wo < 1:
        raise ConfigurationError(f"pooling window {wh}x{ww} too large for {h}x{w}")
    return ho, wo


def maxpool2d_forward(x, wh, ww, sh=None, sw=None, ph=0, pw=0):
    sh, sw = sh or wh, sw or ww
    ho, wo = pool_out_hw(x.shape[2], x.shape[3], wh, ww, sh, sw, ph, pw)
    return backend.impl.maxpool_forward(np.ascontiguousarray(x), wh, ww, sh, sw, ph, pw, ho, wo)


def maxpool2d(x, wh, ww, sh=None, sw=None, ph=0, pw=0):
    return maxpool2d_forward(x, wh, ww, sh, sw, ph, pw)[0]


def maxpool2d_backward(grad, argidx, x_shape):
    return backend.impl.maxpool_backward(grad, argidx, x_shape)


def _check_divisor(h, w, wh, ww):
    if h % wh or w % ww:
        raise FactorViolationError(
            f"pooling window {wh}x{ww} does not divide feature map {h}x{w}")


def avgpool2d(x, wh, ww, sh=None, sw=None, require_divisor=False):
    sh, sw = sh or wh, sw or ww
    n, c, h, w = x.shape
    if require_divisor:
        if (sh, sw) != (wh, ww):
            raise FactorViolationError("divisor pooling requires stride == window")
        _check_divisor(h, w, wh, ww)
    ho, wo = pool_out_hw(h, w, wh, ww, sh, sw)
    if (sh, sw) == (wh, ww) and h == ho * wh and w == wo * ww:
        return x.reshape(n, c, ho, wh, wo, ww).mean(axis=(3, 5))
    out = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for i in range(wh):
        for j in range(ww):
            out += x[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw]
    return out / (wh * ww)


def avgpool2d_backward(grad, x_shape, wh, ww, sh=None, sw=None):
    sh, sw = sh or wh, sw or ww
    n, c, h, w = x_shape
    ho, wo = grad.shape[2:]
    g = grad / (wh * ww)
    if (sh, sw) == (wh, ww) and h == ho * wh and w == wo * ww:
        return np.ascontiguousarray(np.broadcast_to(
            g[:, :, :, None, :, None], (n, c, ho, wh, wo, ww)).reshape(x_shape))
    dx = np.zeros(x_shape, dtype=grad.dtype)
    for i in range(wh):
        for j in range(ww):
            dx[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw] += g
    return dx


def global_avg_pool(x):
    return x.mean(axis=(2, 3), keepdims=True)


def global_avg_pool_backward(grad, x_shape):
    h, w = x_shape[2], x_shape[3]
    return np.ascontiguousarray(np.broadcast_to(grad / (h * w), x_shape))


# ---------------------------------------------------------------- upsampling

def upsample_factors(factor) -> tuple[int, int]:
    """Normalize an integer or ``(fh, fw)`` upsampling factor."""
    fh, fw = (factor, factor) if np.isscalar(factor) else tuple(factor)
    for f in (fh, fw):
        if int(f) != f or f < 1:
            raise ConfigurationError(
                f"upsampling factor must be a positive integer, got {factor}")
    return int(fh), int(fw)


def nearest_upsample(x, factor):
    """Replicate each pixel into an ``fh x fw`` block: y[h, w] = x[h // fh, w // fw]."""
    fh, fw = upsample_factors(factor)
    if fh == fw == 1:
        return x.copy()
    return backend.impl.nearest_upsample(np.ascontiguousarray(x), fh, fw)


def nearest_upsample_backward(grad, factor):
    """Adjoint of replication: sum over each replicated block."""
    fh, fw = upsample_factors(factor)
    if fh == fw == 1:
        return grad.copy()
    return backend.impl.nearest_upsample_adjoint(np.ascontiguousarray(grad), fh, fw)


@lru_cache(maxsize=256)
def _interp_matrix(n_in: int, n_out: int, dtype: str) -> np.ndarray:
    """Half-pixel linear interpolation weights of shape ``(n_out, n_in)``."""
    a = np.zeros((n_out, n_in), dtype=np.float64)
    d = np.arange(n_out)
    s = np.clip((d + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
    lo = np.floor(s).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = s - lo
    np.add.at(a, (d, lo), 1 - frac)
    np.add.at(a, (d, hi), frac)
    a = a.astype(dtype)
    a.setflags(write=False)
    return a


def bilinear_resize(x, out_h, out_w):
    """Half-pixel (align-corners-false) bilinear resampling with edge clamping."""
    _, _, h, w = x.shape
    ah = _interp_matrix(h, out_h, x.dtype.str)
    aw = _interp_matrix(w, out_w, x.dtype.str)
    return np.ascontiguousarray(ah @ (x @ aw.T))


def bilinear_resize_backward(grad, in_h, in_w):
    _, _, oh, ow = grad.shape
    ah = _interp_matrix(in_h, oh, grad.dtype.str)
    aw = _interp_matrix(in_w, ow, grad.dtype.str)
    return np.ascontiguousarray(ah.T @ (grad @ aw))


def bilinear_upsample(x, factor):
    fh, fw = upsample_factors(factor)
    if fh == fw == 1:
        return x.copy()
    return bilinear_resize(x, x.shape[2] * fh, x.shape[3] * fw)


def bilinear_upsample_backward(grad, factor):
    fh, fw = upsample_factors(factor)
    if fh == fw == 1:
        return grad.copy()
    return bilinear_resize_backward(grad, grad.shape[2] // fh, grad.shape[3] // fw)


def bilinear_kernel_3x3() -> np.ndarray:
    """Depthwise kernel that turns nearest x2 upsampling into bilinear x2."""
    return np.array([[1, 2, 1], [2, 4, 2], [1, 2, 1]], dtype=np.float64) / 16.0
