"""Eager reverse-mode differentiation over the kernel set.

Values live on a :class:`Tape` and are referred to by integer ids.  Every
call to :meth:`Tape.apply` runs the forward kernel immediately and records
what the backward pass needs::

    tape = Tape()
    x = tape.leaf(x_arr, name="x")
    w = tape.leaf(w_arr, name="w")
    y = tape.apply("conv2d", [x, w], spec=spec)
    loss = tape.apply("sum", [y])
    grads = backward(tape, loss)
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import kernels as K
from .errors import UsageError


@dataclass
class Record:
    op: str
    inputs: tuple[int, ...]
    output: int
    attrs: dict
    ctx: dict = field(default_factory=dict)


class Tape:
    def __init__(self):
        self.values: list[np.ndarray] = []
        self.requires: list[bool] = []
        self.records: list[Record] = []
        self.names: dict[int, str] = {}

    def _push(self, arr, requires):
        self.values.append(arr)
        self.requires.append(requires)
        return len(self.values) - 1

    def leaf(self, arr, name: str | None = None, requires_grad: bool = True) -> int:
        vid = self._push(np.asarray(arr), requires_grad)
        if name is not None:
            self.names[vid] = name
        return vid

    def apply(self, op: str, inputs, **attrs) -> int:
        try:
            prim = PRIMITIVES[op]
        except KeyError:
            raise UsageError(f"unknown primitive {op!r}") from None
        inputs = tuple(inputs)
        args = [self.values[i] for i in inputs]
        out, ctx = prim.forward(args, attrs)
        vid = self._push(out, any(self.requires[i] for i in inputs))
        self.records.append(Record(op, inputs, vid, attrs, ctx))
        return vid

    def value(self, vid: int) -> np.ndarray:
        return self.values[vid]

    def __len__(self):
        return len(self.records)


def backward(tape: Tape, root: int, seed: float = 1.0) -> dict[int, np.ndarray]:
    """Gradients of the scalar ``root`` with respect to every value on the tape.

    Values that do not influence ``root`` (or do not require gradients) are
    absent from the result.
    """
    out = tape.values[root]
    if np.ndim(out) != 0:
        raise UsageError(f"backward needs a scalar root, got shape {np.shape(out)}")
    grads: dict[int, np.ndarray] = {root: np.asarray(seed, dtype=out.dtype)}
    for rec in reversed(tape.records):
        g = grads.pop(rec.output, None) if rec.output != root else grads.get(root)
        if g is None:
            continue
        needs = [tape.requires[i] for i in rec.inputs]
        if not any(needs):
            continue
        args = [tape.values[i] for i in rec.inputs]
        in_grads = PRIMITIVES[rec.op].backward(g, args, tape.values[rec.output],
                                               rec.ctx, rec.attrs, needs)
        for vid, need, gi in zip(rec.inputs, needs, in_grads):
            if not need or gi is None:
                continue
            if vid in grads:
                grads[vid] = grads[vid] + gi
            else:
                grads[vid] = gi
    # keep leaf gradients (and the root) only
    return grads


@dataclass
class LossOutput:
    loss: float
    grads: dict[str, np.ndarray]
    all_void: bool = False


def named_grads(tape: Tape, grads: dict[int, np.ndarray]) -> dict[str, np.ndarray]:
    """Map leaf names to gradients, filling zeros for untouched leaves."""
    out = {}
    for vid, name in tape.names.items():
        if not tape.requires[vid]:
            continue
        g = grads.get(vid)
        out[name] = np.zeros_like(tape.values[vid]) if g is None else g
    return out


# ---------------------------------------------------------------- primitives

@dataclass(frozen=True)
class Primitive:
    forward: Callable
    backward: Callable


PRIMITIVES: dict[str, Primitive] = {}


def primitive(name):
    def register(cls):
        PRIMITIVES[name] = Primitive(cls.forward, cls.backward)
        return cls
    return register


def _act_backward(g, out, act):
    return g * (out > 0) if act == "relu" else g


@primitive("conv2d")
class _Conv:
    def forward(args, attrs):
        x, w = args[0], args[1]
        b = args[2] if len(args) > 2 else None
        out, saved = K.conv2d_forward(x, w, b, attrs["spec"])
        if attrs.get("act") == "relu":
            np.maximum(out, 0, out=out)
        return out, {"saved": saved}

    def backward(g, args, out, ctx, attrs, needs):
        g = _act_backward(g, out, attrs.get("act"))
        dx, dw, db = K.conv2d_backward(g, args[0], args[1], attrs["spec"],
                                       ctx["saved"], need_dx=needs[0])
        return [dx, dw, db] if len(args) > 2 else [dx, dw]


@primitive("batchnorm_train")
class _BNTrain:
    def forward(args, attrs):
        x, gamma, beta = args
        eps = attrs.get("eps", K.BN_EPS)
        y, running, (mean, var) = K.batchnorm_train(
            x, gamma, beta, attrs["running_mean"], attrs["running_var"], eps,
            attrs.get("momentum", K.BN_MOMENTUM))
        return y, {"running": running, "mean": mean, "var": var}

    def backward(g, args, out, ctx, attrs, needs):
        x, gamma, _ = args
        dx, dgamma, dbeta = K.batchnorm_train_backward(
            g, x, gamma, ctx["mean"], ctx["var"], attrs.get("eps", K.BN_EPS))
        return [dx, dgamma.astype(gamma.dtype), dbeta.astype(gamma.dtype)]


@primitive("batchnorm_infer")
class _BNInfer:
    def forward(args, attrs):
        x, gamma, beta = args
        eps = attrs.get("eps", K.BN_EPS)
        return K.batchnorm_infer(x, gamma, beta, attrs["running_mean"],
                                 attrs["running_var"], eps), {}

    def backward(g, args, out, ctx, attrs, needs):
        x, gamma, _ = args
        c = x.shape[1]
        inv = 1.0 / np.sqrt(np.asarray(attrs["running_var"]) + attrs.get("eps", K.BN_EPS))
        xhat = (x - np.asarray(attrs["running_mean"]).reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
        dx = g * (gamma * inv).reshape(1, c, 1, 1).astype(g.dtype)
        return [dx, (g * xhat).sum(axis=(0, 2, 3)).astype(gamma.dtype),
                g.sum(axis=(0, 2, 3)).astype(gamma.dtype)]


@primitive("relu")
class _Relu:
    def forward(args, attrs):
        return K.relu(args[0]), {}

    def backward(g, args, out, ctx, attrs, needs):
        return [K.relu_backward(g, args[0])]


@primitive("sigmoid")
class _Sigmoid:
    def forward(args, attrs):
        return K.sigmoid(args[0]), {}

    def backward(g, args, out, ctx, attrs, needs):
        return [g * out * (1 - out)]


@primitive("maxpool2d")
class _MaxPool:
    def forward(args, attrs):
        out, arg = K.maxpool2d_forward(args[0], attrs["window_h"], attrs["window_w"],
                                       attrs["stride_h"], attrs["stride_w"],
                                       attrs.get("pad_h", 0), attrs.get("pad_w", 0))
        return out, {"arg": arg}

    def backward(g, args, out, ctx, attrs, needs):
        return [K.maxpool2d_backward(g, ctx["arg"], args[0].shape)]


@primitive("avgpool2d")
class _AvgPool:
    def forward(args, attrs):
        return K.avgpool2d(args[0], attrs["window_h"], attrs["window_w"],
                           attrs["stride_h"], attrs["stride_w"],
                           attrs.get("require_divisor", False)), {}

    def backward(g, args, out, ctx, attrs, needs):
        return [K.avgpool2d_backward(g, args[0].shape, attrs["window_h"], attrs["window_w"],
                                     attrs["stride_h"], attrs["stride_w"])]


@primitive("global_avg_pool")
class _GAP:
    def forward(args, attrs):
        return K.global_avg_pool(args[0]), {}

    def backward(g, args, out, ctx, attrs, needs):
        return [K.global_avg_pool_backward(g, args[0].shape)]


@primitive("nearest_upsample")
class _Nearest:
    def forward(args, attrs):
        return K.nearest_upsample(args[0], attrs["factor"]), {}

    def backward(g, args, out, ctx, attrs, needs):
        return [K.nearest_upsample_backward(g, attrs["factor"])]


@primitive("bilinear_upsample")
class _Bilinear:
    def forward(args, attrs):
        return K.bilinear_upsample(args[0], attrs["factor"]), {}

    def backward(g, args, out, ctx, attrs, needs):
        return [K.bilinear_upsample_backward(g, attrs["factor"])]


@primitive("add")
class _Add:
    def forward(args, attrs):
        out = K.add(args[0], args[1])
        if attrs.get("act") == "relu":
            out = K.relu(out)
        return out, {}

    def backward(g, args, out, ctx, attrs, needs):
        g = _act_backward(g, out, attrs.get("act"))
        return [g, g]


@primitive("concat")
class _Concat:
    def forward(args, attrs):
        return K.concat_channels(args), {}

    def backward(g, args, out, ctx, attrs, needs):
        bounds = np.cumsum([0] + [a.shape[1] for a in args])
        return [g[:, bounds[i]:bounds[i + 1]] for i in range(len(args))]


@primitive("scale_channels")
class _Scale:
    def forward(args, attrs):
        return K.scale_channels(args[0], args[1]), {}

    def backward(g, args, out, ctx, attrs, needs):
        x, gate = args
        dgate = (g * x).sum(axis=(2, 3), keepdims=True) if needs[1] else None
        return [g * gate, dgate]


@primitive("sum")
class _Sum:
    def forward(args, attrs):
        return np.asarray(args[0].sum(), dtype=args[0].dtype), {}

    def backward(g, args, out, ctx, attrs, needs):
        return [np.full_like(args[0], g)]


@primitive("weighted_sum")
class _WeightedSum:
    """``sum(x * weights)`` with a constant weight array."""

    def forward(args, attrs):
        return np.asarray((args[0] * attrs["weights"]).sum(), dtype=args[0].dtype), {}

    def backward(g, args, out, ctx, attrs, needs):
        return [(g * attrs["weights"]).astype(args[0].dtype)]


@primitive("scale")
class _ScaleConst:
    def forward(args, attrs):
        return np.asarray(args[0] * attrs["k"], dtype=args[0].dtype), {}

    def backward(g, args, out, ctx, attrs, needs):
        return [g * attrs["k"]]


@primitive("linear_combination")
class _LinComb:
    """``sum_i k_i * x_i`` over same-shaped inputs with constant coefficients."""

    def forward(args, attrs):
        ks = attrs["coefficients"]
        if len(ks) != len(args):
            raise UsageError("linear_combination needs one coefficient per input")
        out = sum(k * a for k, a in zip(ks, args))
        return np.asarray(out, dtype=args[0].dtype), {}

    def backward(g, args, out, ctx, attrs, needs):
        return [np.asarray(g * k, dtype=a.dtype) for k, a in zip(attrs["coefficients"], args)]


# ---------------------------------------------------------------- loss

def softmax_cross_entropy(logits, labels, class_weights, void_label=255):
    """Class-weighted pixelwise cross entropy averaged over non-void pixels.

    Returns ``(loss, dlogits, all_void)``.  When every pixel is void the loss
    is defined as 0 with a zero gradient and ``all_void`` is True.
    """
    n, c, h, w = logits.shape
    labels = np.asarray(labels).reshape(n, h, w).astype(np.int64)
    weights = np.asarray(class_weights, dtype=np.float64)
    if weights.shape != (c,):
        raise UsageError(f"class_weights must have length {c}")
    if np.any(weights <= 0):
        raise UsageError("class_weights must be positive")
    valid = labels != void_label
    bad = valid & ((labels < 0) | (labels >= c))
    if bad.any():
        raise UsageError(f"labels outside [0, {c}) and not void: {np.unique(labels[bad])}")
    count = int(valid.sum())
    if count == 0:
        return np.asarray(0.0, dtype=logits.dtype), np.zeros_like(logits), True
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    safe = np.where(valid, labels, 0)
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    pix_w = np.where(valid, weights[safe], 0.0)
    loss = -(pix_w * picked).sum() / count
    grad = np.exp(logp)
    np.put_along_axis(grad, safe[:, None],
                      np.take_along_axis(grad, safe[:, None], axis=1) - 1.0, axis=1)
    grad *= (pix_w / count)[:, None]
    return np.asarray(loss, dtype=logits.dtype), grad.astype(logits.dtype), False


@primitive("softmax_cross_entropy")
class _CE:
    def forward(args, attrs):
        loss, grad, all_void = softmax_cross_entropy(
            args[0], attrs["labels"], attrs["class_weights"], attrs.get("void_label", 255))
        return loss, {"grad": grad, "all_void": all_void}

    def backward(g, args, out, ctx, attrs, needs):
        return [ctx["grad"] * g]


# ---------------------------------------------------------------- grad check

def grad_check(fn: Callable, inputs, step: float = 1e-3, max_coords: int | None = None,
               seed: int = 0, skip: Callable | None = None, order: int = 4) -> float:
    """Compare the tape gradient of ``fn`` against central differences.

    ``order`` 4 uses the five-point stencil (truncation error O(step^4)),
    ``order`` 2 the classic two-point one.

    ``fn(tape, *ids)`` builds a computation on the tape and returns the id of
    its output.  Non-scalar outputs are reduced with a fixed random
    projection.  Every input coordinate is checked unless ``max_coords``
    limits it to a random sample.  ``skip(input_index, flat_index)`` can
    exclude coordinates sitting on a kink.  Returns the maximum relative
    error ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if order not in (2, 4):
        raise UsageError("grad_check order must be 2 or 4")
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    rng = np.random.default_rng(seed)
    proj = None

    def forward(xs):
        tape = Tape()
        ids = [tape.leaf(x, name=str(i)) for i, x in enumerate(xs)]
        return tape, ids, fn(tape, *ids)

    tape, ids, out = forward(inputs)
    if np.ndim(tape.value(out)) != 0:
        proj = rng.standard_normal(np.shape(tape.value(out)))
        out = tape.apply("weighted_sum", [out], weights=proj)
    grads = backward(tape, out)
    analytic = [grads.get(i, np.zeros_like(inputs[k])) for k, i in enumerate(ids)]

    def output(xs):
        t, _, o = forward(xs)
        return np.asarray(t.value(o), dtype=np.float64)

    worst = 0.0
    for k, x in enumerate(inputs):
        coords = np.arange(x.size)
        if max_coords is not None and x.size > max_coords:
            coords = rng.choice(x.size, size=max_coords, replace=False)
        for idx in coords:
            if skip is not None and skip(k, int(idx)):
                continue
            orig = x.flat[idx]

            def at(delta):
                x.flat[idx] = orig + delta
                return output(inputs)
            # difference before projecting: untouched outputs cancel exactly
            if order == 2:
                diff = (at(step) - at(-step)) / 2
            else:
                diff = (8 * (at(step) - at(-step)) - (at(2 * step) - at(-2 * step))) / 12
            x.flat[idx] = orig
            num = float((diff * proj).sum() if proj is not None else diff) / step
            a = float(analytic[k].flat[idx])
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
    return worst
