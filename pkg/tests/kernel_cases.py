"""Randomized kernel instances paired with their brute-force oracle results.

Each case takes ``(rng, dtype)`` and returns ``(actual, expected)`` arrays.
"""
import numpy as np

import oracles as O
from esanet import kernels as K
from esanet.kernels import backend
from esanet.tensor import ConvSpec


def _x(rng, shape, dtype):
    return rng.standard_normal(shape).astype(dtype)


def conv2d(rng, dtype):
    kind = rng.integers(0, 3)
    if kind == 0:  # dense
        g, cin, cout = 1, int(rng.integers(1, 5)), int(rng.integers(1, 5))
    elif kind == 1:  # grouped
        g = int(rng.integers(2, 4))
        cin, cout = g * int(rng.integers(1, 3)), g * int(rng.integers(1, 3))
    else:  # depthwise
        g = cin = cout = int(rng.integers(2, 5))
    kh, kw = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    spec = ConvSpec(cin, cout, kh, kw, int(rng.integers(1, 3)), int(rng.integers(1, 3)),
                    int(rng.integers(0, kh)), int(rng.integers(0, kw)), g, bool(rng.integers(2)))
    x = _x(rng, (int(rng.integers(1, 3)), cin, int(rng.integers(kh, 7)),
                 int(rng.integers(kw, 7))), dtype)
    w = _x(rng, spec.weight_shape, dtype)
    b = _x(rng, (cout,), dtype) if spec.has_bias else None
    return (K.conv2d(x, w, b, spec),
            O.conv2d(x, w, b, spec.stride_h, spec.stride_w, spec.pad_h, spec.pad_w, g))


def im2col(rng, dtype):
    kh, kw = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    sh, sw, ph, pw = (int(rng.integers(1, 3)), int(rng.integers(1, 3)),
                      int(rng.integers(0, kh)), int(rng.integers(0, kw)))
    x = _x(rng, (int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(kh, 7)),
                 int(rng.integers(kw, 7))), dtype)
    ho, wo = (x.shape[2] + 2 * ph - kh) // sh + 1, (x.shape[3] + 2 * pw - kw) // sw + 1
    return backend.impl.im2col(x, kh, kw, sh, sw, ph, pw, ho, wo), \
        O.im2col(x, kh, kw, sh, sw, ph, pw)


def batchnorm_infer(rng, dtype):
    c = int(rng.integers(1, 5))
    x = _x(rng, (2, c, 3, 4), dtype)
    gamma, beta, mean = (_x(rng, (c,), dtype) for _ in range(3))
    var = rng.uniform(0.1, 3, c).astype(dtype)
    return K.batchnorm_infer(x, gamma, beta, mean, var), \
        O.batchnorm_infer(x, gamma, beta, mean, var, K.BN_EPS)


def batchnorm_train(rng, dtype):
    c = int(rng.integers(1, 5))
    x = (_x(rng, (int(rng.integers(1, 4)), c, 3, 3), dtype) * 3 + 1).astype(dtype)
    gamma, beta = _x(rng, (c,), dtype), _x(rng, (c,), dtype)
    y, _, _ = K.batchnorm_train(x, gamma, beta, np.zeros(c), np.ones(c))
    return y, O.batchnorm_train(x, gamma, beta, K.BN_EPS)[0]


def relu(rng, dtype):
    x = _x(rng, (2, 3, 4, 5), dtype)
    return K.relu(x), O.relu(x)


def sigmoid(rng, dtype):
    x = (_x(rng, (2, 3, 4, 5), dtype) * 10).astype(dtype)
    return K.sigmoid(x), O.sigmoid(x)


def maxpool2d(rng, dtype):
    k, s = int(rng.integers(1, 4)), int(rng.integers(1, 3))
    p = int(rng.integers(0, k // 2 + 1))
    x = _x(rng, (int(rng.integers(1, 3)), 2, int(rng.integers(k, 8)), int(rng.integers(k, 8))),
           dtype)
    out, arg = K.maxpool2d_forward(x, k, k, s, s, p, p)
    ref, ref_arg = O.maxpool(x, k, k, s, s, p, p)
    assert np.array_equal(arg.reshape(ref_arg.shape), ref_arg)
    return out, ref


def avgpool2d(rng, dtype):
    wh, ww = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    if rng.integers(2):
        sh, sw = wh, ww
        shape = (1, 2, wh * int(rng.integers(1, 4)), ww * int(rng.integers(1, 4)))
    else:
        sh, sw = int(rng.integers(1, 3)), int(rng.integers(1, 3))
        shape = (1, 2, int(rng.integers(wh, 8)), int(rng.integers(ww, 8)))
    x = _x(rng, shape, dtype)
    return K.avgpool2d(x, wh, ww, sh, sw), O.avgpool(x, wh, ww, sh, sw)


def global_avg_pool(rng, dtype):
    x = _x(rng, (2, 3, int(rng.integers(1, 6)), int(rng.integers(1, 6))), dtype)
    return K.global_avg_pool(x), O.global_avg_pool(x)


def nearest_upsample(rng, dtype):
    fh, fw = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    x = _x(rng, (1, 2, int(rng.integers(1, 5)), int(rng.integers(1, 5))), dtype)
    return K.nearest_upsample(x, (fh, fw)), O.nearest(x, fh, fw)


def bilinear_upsample(rng, dtype):
    f = int(rng.integers(1, 5))
    x = _x(rng, (1, 2, int(rng.integers(1, 6)), int(rng.integers(1, 6))), dtype)
    return K.bilinear_upsample(x, f), O.bilinear(x, x.shape[2] * f, x.shape[3] * f)


def bilinear_resize(rng, dtype):
    x = _x(rng, (1, 2, int(rng.integers(1, 7)), int(rng.integers(1, 7))), dtype)
    oh, ow = int(rng.integers(1, 10)), int(rng.integers(1, 10))
    return K.bilinear_resize(x, oh, ow), O.bilinear(x, oh, ow)


def add(rng, dtype):
    a, b = _x(rng, (2, 3, 3, 2), dtype), _x(rng, (2, 3, 3, 2), dtype)
    ref = np.zeros(a.shape)
    for idx in np.ndindex(a.shape):
        ref[idx] = float(a[idx]) + float(b[idx])
    return K.add(a, b), ref


def concat(rng, dtype):
    xs = [_x(rng, (2, int(rng.integers(1, 4)), 3, 2), dtype) for _ in range(int(rng.integers(1, 4)))]
    ref = np.zeros((2, sum(x.shape[1] for x in xs), 3, 2))
    c0 = 0
    for x in xs:
        for idx in np.ndindex(x.shape):
            ref[idx[0], c0 + idx[1], idx[2], idx[3]] = x[idx]
        c0 += x.shape[1]
    return K.concat_channels(xs), ref


def scale_channels(rng, dtype):
    x, g = _x(rng, (2, 3, 3, 2), dtype), _x(rng, (2, 3, 1, 1), dtype)
    ref = np.zeros(x.shape)
    for idx in np.ndindex(x.shape):
        ref[idx] = float(x[idx]) * float(g[idx[0], idx[1], 0, 0])
    return K.scale_channels(x, g), ref


CASES = {
    "conv2d": conv2d, "im2col": im2col, "batchnorm_infer": batchnorm_infer,
    "batchnorm_train": batchnorm_train, "relu": relu, "sigmoid": sigmoid,
    "maxpool2d": maxpool2d, "avgpool2d": avgpool2d, "global_avg_pool": global_avg_pool,
    "nearest_upsample": nearest_upsample, "bilinear_upsample": bilinear_upsample,
    "bilinear_resize": bilinear_resize, "add": add, "concat": concat,
    "scale_channels": scale_channels,
}
TOLERANCE = {np.float32: 1e-5, np.float64: 1e-10}


def worst_error(name, dtype, instances, seed=0):
    worst = 0.0
    for i in range(instances):
        rng = np.random.default_rng([seed, i, sum(map(ord, name))])
        out, ref = CASES[name](rng, dtype)
        assert out.dtype == np.dtype(dtype), (name, out.dtype)
        worst = max(worst, O.rel_err(out, ref))
    return worst
