"""Pure-numpy versions of the hot loops.

Every function here has a drop-in twin in ``_ckernels.pyx``.  im2col,
col2im and the pooling kernels agree bit for bit with the compiled versions;
the upsample adjoint may differ in summation order.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, kh, kw, sh, sw, ph, pw, ho, wo):
    """Return columns of shape ``(C*kh*kw, N*ho*wo)``."""
    n, c, _, _ = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x
    xt = xp.transpose(1, 0, 2, 3)
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw]
    return cols.reshape(c * kh * kw, n * ho * wo)


def col2im(cols, x_shape, kh, kw, sh, sw, ph, pw, ho, wo):
    """Adjoint of :func:`im2col`: scatter-add columns back into an image."""
    n, c, h, w = x_shape
    cols = cols.reshape(c, kh, kw, n, ho, wo)
    dxp = np.zeros((c, n, h + 2 * ph, w + 2 * pw), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw] += cols[:, i, j]
    return np.ascontiguousarray(dxp[:, :, ph:ph + h, pw:pw + w].transpose(1, 0, 2, 3))


def maxpool_forward(x, kh, kw, sh, sw, ph, pw, ho, wo):
    """Max pooling with -inf padding; returns output and flat argmax (h*W+w)."""
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=-np.inf)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :ho, :wo]
    win = win.reshape(n, c, ho, wo, kh * kw)
    k = win.argmax(axis=-1)
    out = np.take_along_axis(win, k[..., None], axis=-1)[..., 0]
    rows = np.arange(ho)[:, None] * sh + k // kw - ph
    cols = np.arange(wo)[None, :] * sw + k % kw - pw
    return np.ascontiguousarray(out), (rows * w + cols).astype(np.int64)


def maxpool_backward(grad, argidx, x_shape):
    n, c, h, w = x_shape
    dx = np.zeros((n * c, h * w), dtype=grad.dtype)
    g = grad.reshape(n * c, -1)
    idx = argidx.reshape(n * c, -1)
    for r in range(n * c):
        np.add.at(dx[r], idx[r], g[r])
    return dx.reshape(x_shape)


def nearest_upsample(x, fh, fw):
    return np.ascontiguousarray(np.repeat(np.repeat(x, fh, axis=2), fw, axis=3))


def nearest_upsample_adjoint(grad, fh, fw):
    n, c, h, w = grad.shape
    return np.ascontiguousarray(
        grad.reshape(n, c, h // fh, fh, w // fw, fw).sum(axis=(3, 5)))
