"""Self-check property suites run by ``esanet verify``.

Each suite returns a :class:`SuiteResult`; the report passes only when every
suite does.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels as K
from .autodiff import grad_check
from .blocks import ContextSpec, compute_pool_sizes
from .errors import FactorViolationError
from .graph import GraphBuilder, execute, optimize
from .tensor import ConvSpec

GRAD_TOL = 1e-6
BILINEAR_TOL = 1e-6
FOLD_TOL = 1e-4


@dataclass
class SuiteResult:
    name: str
    passed: bool
    max_error: float
    tolerance: float
    instances: int
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}  {self.name:<28} max_err={self.max_error:.3e} "
                f"tol={self.tolerance:.0e} n={self.instances} {self.detail}").rstrip()


@dataclass
class VerifyReport:
    results: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def to_text(self) -> str:
        lines = [r.line() for r in self.results]
        lines.append(f"{'all suites passed' if self.passed else 'FAILURES'} "
                     f"({sum(r.passed for r in self.results)}/{len(self.results)})")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {"passed": self.passed,
                "suites": [{"name": r.name, "passed": r.passed, "max_error": r.max_error,
                            "tolerance": r.tolerance, "instances": r.instances,
                            "detail": r.detail} for r in self.results]}


# ---------------------------------------------------------------- grad cases

def spaced_values(rng, shape, spacing=0.05, offset=0.0):
    """Distinct values at least ``spacing`` apart, none within ``spacing/2`` of ``offset``.

    Keeps ReLU and max-pool inputs away from their kinks.
    """
    n = int(np.prod(shape))
    v = (rng.permutation(n) - n / 2 + 0.5) * spacing + offset
    return v.reshape(shape)


def _rand_conv(rng):
    depthwise = rng.random() < 0.25
    if depthwise:
        c = int(rng.integers(2, 5))
        cin = cout = groups = c
    else:
        groups = int(rng.choice([1, 1, 2]))
        cin = groups * int(rng.integers(1, 3))
        cout = groups * int(rng.integers(1, 3))
    kh, kw = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    return ConvSpec(cin, cout, kh, kw, int(rng.integers(1, 3)), int(rng.integers(1, 3)),
                    int(rng.integers(0, kh)), int(rng.integers(0, kw)), groups,
                    bool(rng.random() < 0.5))


def _case_conv(rng):
    spec = _rand_conv(rng)
    n, h, w = int(rng.integers(1, 3)), int(rng.integers(3, 7)), int(rng.integers(3, 7))
    x = rng.standard_normal((n, spec.in_channels, h, w))
    wt = rng.standard_normal(spec.weight_shape)
    ins = [x, wt] + ([rng.standard_normal(spec.out_channels)] if spec.has_bias else [])
    return (lambda t, *ids: t.apply("conv2d", ids, spec=spec)), ins


def _case_bn_train(rng):
    c = int(rng.integers(1, 4))
    x = rng.standard_normal((2, c, int(rng.integers(2, 5)), int(rng.integers(2, 5)))) * 2 + 1
    zeros, ones = np.zeros(c), np.ones(c)
    return (lambda t, *ids: t.apply("batchnorm_train", ids, running_mean=zeros,
                                    running_var=ones)), \
        [x, rng.standard_normal(c), rng.standard_normal(c)]


def _case_bn_infer(rng):
    c = int(rng.integers(1, 4))
    x = rng.standard_normal((2, c, 3, 3))
    mean, var = rng.standard_normal(c), rng.uniform(0.5, 2.0, c)
    return (lambda t, *ids: t.apply("batchnorm_infer", ids, running_mean=mean,
                                    running_var=var)), \
        [x, rng.standard_normal(c), rng.standard_normal(c)]


def _case_relu(rng):
    return (lambda t, x: t.apply("relu", [x])), [spaced_values(rng, (2, 2, 3, 3))]


def _case_sigmoid(rng):
    shape = (1, 2, 3, 3)
    x = rng.uniform(-9, 9, shape)
    # a few strongly negative entries exercise the saturated branch
    mask = rng.random(shape) < 0.2
    x[mask] = rng.uniform(-40, -20, int(mask.sum()))
    return (lambda t, x: t.apply("sigmoid", [x])), [x]


def _case_maxpool(rng):
    k, s = int(rng.integers(2, 4)), int(rng.integers(1, 3))
    p = int(rng.integers(0, k // 2 + 1))
    x = spaced_values(rng, (1, 2, int(rng.integers(k, 7)), int(rng.integers(k, 7))))
    return (lambda t, x: t.apply("maxpool2d", [x], window_h=k, window_w=k, stride_h=s,
                                 stride_w=s, pad_h=p, pad_w=p)), [x]


def _case_avgpool(rng):
    wh, ww = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    x = rng.standard_normal((1, 2, wh * int(rng.integers(1, 4)), ww * int(rng.integers(1, 4))))
    return (lambda t, x: t.apply("avgpool2d", [x], window_h=wh, window_w=ww, stride_h=wh,
                                 stride_w=ww, require_divisor=True)), [x]


def _case_gap(rng):
    return (lambda t, x: t.apply("global_avg_pool", [x])), \
        [rng.standard_normal((2, 3, int(rng.integers(1, 5)), int(rng.integers(1, 5))))]


def _case_nearest(rng):
    f = (int(rng.integers(1, 4)), int(rng.integers(1, 4)))
    return (lambda t, x: t.apply("nearest_upsample", [x], factor=f)), \
        [rng.standard_normal((1, 2, 3, 4))]


def _case_bilinear(rng):
    f = int(rng.integers(2, 4))
    return (lambda t, x: t.apply("bilinear_upsample", [x], factor=f)), \
        [rng.standard_normal((1, 2, int(rng.integers(1, 5)), int(rng.integers(1, 5))))]


def _case_add(rng):
    shape = (1, 2, 3, 3)
    return (lambda t, a, b: t.apply("add", [a, b])), \
        [rng.standard_normal(shape), rng.standard_normal(shape)]


def _case_concat(rng):
    k = int(rng.integers(2, 4))
    return (lambda t, *ids: t.apply("concat", ids)), \
        [rng.standard_normal((1, int(rng.integers(1, 4)), 3, 2)) for _ in range(k)]


def _case_scale(rng):
    c = int(rng.integers(1, 4))
    return (lambda t, x, g: t.apply("scale_channels", [x, g])), \
        [rng.standard_normal((2, c, 3, 3)), rng.standard_normal((2, c, 1, 1))]


def _case_se_gate(rng):
    c, r = 4, 2
    x = rng.standard_normal((2, c, 3, 3))
    w1, b1 = rng.standard_normal((r, c, 1, 1)), rng.standard_normal(r)
    w2, b2 = rng.standard_normal((c, r, 1, 1)), rng.standard_normal(c)
    fc1, fc2 = ConvSpec(c, r, 1, 1, has_bias=True), ConvSpec(r, c, 1, 1, has_bias=True)

    def fn(t, x, w1, b1, w2, b2):
        g = t.apply("global_avg_pool", [x])
        g = t.apply("relu", [t.apply("conv2d", [g, w1, b1], spec=fc1)])
        g = t.apply("sigmoid", [t.apply("conv2d", [g, w2, b2], spec=fc2)])
        return t.apply("scale_channels", [x, g])
    return fn, [x, w1, b1, w2, b2]


def _case_learned_upsample(rng):
    c = int(rng.integers(1, 4))
    spec = ConvSpec(c, c, 3, 3, pad_h=1, pad_w=1, groups=c)
    x = rng.standard_normal((1, c, int(rng.integers(2, 5)), int(rng.integers(2, 5))))
    k = np.tile(K.bilinear_kernel_3x3(), (c, 1, 1, 1)) + 0.1 * rng.standard_normal((c, 1, 3, 3))

    def fn(t, x, k):
        return t.apply("conv2d", [t.apply("nearest_upsample", [x], factor=2), k], spec=spec)
    return fn, [x, k]


def _case_weighted_loss(rng):
    c = int(rng.integers(2, 5))
    logits = rng.standard_normal((2, c, 3, 3)) * 2
    labels = rng.integers(0, c, (2, 1, 3, 3))
    labels[rng.random(labels.shape) < 0.2] = 255
    labels.flat[0] = 0
    cw = rng.uniform(0.2, 3.0, c)
    return (lambda t, z: t.apply("softmax_cross_entropy", [z], labels=labels,
                                 class_weights=cw)), [logits]


def _case_linear_combination(rng):
    ks = tuple(rng.standard_normal(3))
    return (lambda t, *ids: t.apply("linear_combination", ids, coefficients=ks)), \
        [rng.standard_normal((1, 2, 2, 2)) for _ in range(3)]


GRAD_CASES = {
    "conv2d": _case_conv, "batchnorm_train": _case_bn_train, "batchnorm_infer": _case_bn_infer,
    "relu": _case_relu, "sigmoid": _case_sigmoid, "maxpool2d": _case_maxpool,
    "avgpool2d": _case_avgpool, "global_avg_pool": _case_gap,
    "nearest_upsample": _case_nearest, "bilinear_upsample": _case_bilinear, "add": _case_add,
    "concat": _case_concat, "scale_channels": _case_scale,
    "linear_combination": _case_linear_combination, "se_gate": _case_se_gate,
    "learned_upsample": _case_learned_upsample, "weighted_loss": _case_weighted_loss,
}


def grad_suite(name: str, instances: int = 20, seed: int = 0) -> SuiteResult:
    worst = 0.0
    for i in range(instances):
        rng = np.random.default_rng([seed, i, sum(map(ord, name))])
        fn, inputs = GRAD_CASES[name](rng)
        worst = max(worst, grad_check(fn, inputs, seed=i))
    return SuiteResult(f"grad/{name}", worst < GRAD_TOL, worst, GRAD_TOL, instances)


# ---------------------------------------------------------------- bilinear mimicry

def learned_upsample_reference(x, kernel=None):
    """Nearest x2 then depthwise 3x3 with ``kernel`` (default: the bilinear init)."""
    c = x.shape[1]
    k = K.bilinear_kernel_3x3() if kernel is None else np.asarray(kernel)
    w = np.tile(k.astype(x.dtype), (c, 1, 1, 1))
    return K.conv2d(K.nearest_upsample(x, 2), w, None,
                    ConvSpec(c, c, 3, 3, pad_h=1, pad_w=1, groups=c))


def bilinear_suite(instances: int = 100, seed: int = 0, kernel=None) -> SuiteResult:
    worst = 0.0
    for i in range(instances):
        rng = np.random.default_rng([seed, i])
        x = rng.standard_normal((int(rng.integers(1, 3)), int(rng.integers(1, 5)),
                                 int(rng.integers(2, 10)), int(rng.integers(2, 10))))
        x = x.astype(np.float32)
        a = learned_upsample_reference(x, kernel)[:, :, 1:-1, 1:-1]
        b = K.bilinear_upsample(x, 2)[:, :, 1:-1, 1:-1]
        worst = max(worst, float(np.abs(a - b).max()))
    return SuiteResult("bilinear_mimicry", worst <= BILINEAR_TOL, worst, BILINEAR_TOL, instances)


# ---------------------------------------------------------------- folding

def randomize_bn_stats(graph, rng):
    """Give every batch norm non-trivial affine parameters and running stats."""
    g = graph.copy()
    for n in g.nodes:
        if n.op != "batchnorm":
            continue
        c = g.weights[n.attrs["gamma"]].shape[0]
        dt = g.weights[n.attrs["gamma"]].dtype
        g.weights[n.attrs["gamma"]] = rng.uniform(0.5, 1.5, c).astype(dt)
        g.weights[n.attrs["beta"]] = rng.normal(0, 0.2, c).astype(dt)
        g.weights[n.attrs["mean"]] = rng.normal(0, 0.2, c).astype(dt)
        g.weights[n.attrs["var"]] = rng.uniform(0.5, 2.0, c).astype(dt)
    return g


def relative_error(out, ref) -> float:
    """Norm-wise relative error ``max|out - ref| / max|ref|``."""
    scale = float(np.abs(ref).max())
    return float(np.abs(out - ref).max()) / (scale if scale > 0 else 1.0)


def _fold_graph(seed):
    b = GraphBuilder(seed)
    x = b.input("x", (2, 4, 8, 8))
    y = b.relu(b.bn(b.conv(x, 8, 3, name="c1"), name="b1"), name="r1")
    z = b.bn(b.conv(y, 8, 3, bias=True, name="c2"), name="b2")
    s = b.bn(b.conv(x, 8, 1, pad=0, name="c3"), name="b3")
    b.output("y", b.relu(b.add(z, s, name="add"), name="r2"))
    return b.build()


def fold_suite(instances: int = 10, seed: int = 0) -> SuiteResult:
    rng = np.random.default_rng(seed)
    g = randomize_bn_stats(_fold_graph(seed), rng)
    opt = optimize(g)
    worst = 0.0
    for _ in range(instances):
        x = rng.standard_normal((2, 4, 8, 8)).astype(np.float32)
        worst = max(worst, relative_error(execute(opt, {"x": x})["y"],
                                          execute(g, {"x": x})["y"]))
    fewer = len(opt.nodes) < len(g.nodes)
    return SuiteResult("fold_equivalence", worst < FOLD_TOL and fewer, worst, FOLD_TOL, instances,
                       f"nodes {len(g.nodes)}->{len(opt.nodes)}")


# ---------------------------------------------------------------- pooling guards

def pooling_guard_suite() -> SuiteResult:
    failures = []
    for h, w, bad in ((15, 20, (4, 3)), (16, 32, (3, 4)), (7, 5, (2, 2))):
        try:
            ContextSpec(h, w, ["global", bad])
            failures.append(f"{h}x{w} accepted {bad}")
        except FactorViolationError:
            pass
    try:
        K.avgpool2d(np.zeros((1, 1, 7, 5), np.float32), 2, 2, 2, 2, require_divisor=True)
        failures.append("avgpool accepted 2x2 window on 7x5")
    except FactorViolationError:
        pass
    for h, w in ((15, 20), (16, 32), (30, 40), (7, 5)):
        for p in compute_pool_sizes(h, w)[1:]:
            if h % p[0] or w % p[1]:
                failures.append(f"computed size {p} for {h}x{w}")
    return SuiteResult("pooling_factor_guards", not failures, float(len(failures)), 0, 8,
                       "; ".join(failures))


def run_verify(instances: int = 20, seed: int = 0, upsample_kernel=None,
               suites=None) -> VerifyReport:
    report = VerifyReport()
    names = list(GRAD_CASES) if suites is None else [s for s in suites if s in GRAD_CASES]
    for name in names:
        report.results.append(grad_suite(name, instances, seed))
    if suites is None or "bilinear" in suites:
        report.results.append(bilinear_suite(100, seed, upsample_kernel))
    if suites is None or "fold" in suites:
        report.results.append(fold_suite(10, seed))
    if suites is None or "pooling" in suites:
        report.results.append(pooling_guard_suite())
    return report


def output_equivalence(graph, other, trials: int = 10, seed: int = 0, batch: int = 1) -> float:
    """Worst norm-wise relative deviation of ``other`` from ``graph`` over random inputs."""
    from .graph import random_inputs
    worst = 0.0
    for i in range(trials):
        inputs = random_inputs(graph, batch, seed=seed * 1000 + i)
        ref, out = execute(graph, inputs), execute(other, inputs)
        for k in ref:
            worst = max(worst, relative_error(out[k], ref[k]))
    return worst
