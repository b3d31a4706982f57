"""Static graph representation, shape inference and execution."""
from __future__ import annotations

import contextlib
import copy
from dataclasses import dataclass, field, replace

import numpy as np

from .. import kernels as K
from ..errors import ConfigurationError, FactorViolationError, UsageError
from ..tensor import ConvSpec, resolve_dtype

OPS = ("input", "conv2d", "batchnorm", "relu", "sigmoid", "maxpool2d", "avgpool2d",
       "global_avg_pool", "nearest_upsample", "bilinear_upsample", "add", "concat",
       "scale_channels")

# attrs that name entries of the weight store
WEIGHT_ATTRS = {"conv2d": ("weight", "bias"), "batchnorm": ("gamma", "beta", "mean", "var")}
BUFFER_ATTRS = {"batchnorm": ("mean", "var")}


@dataclass
class Node:
    id: int
    op: str
    inputs: tuple[int, ...]
    attrs: dict
    shape: tuple[int, int, int, int] | None = None
    name: str = ""
    stage: str = ""

    def weight_names(self) -> list[str]:
        return [self.attrs[k] for k in WEIGHT_ATTRS.get(self.op, ()) if self.attrs.get(k)]


@dataclass
class Graph:
    nodes: list[Node]
    inputs: dict[str, int]
    outputs: dict[str, int]
    weights: dict[str, np.ndarray]
    dtype: str = "f32"
    meta: dict = field(default_factory=dict)

    def node_map(self) -> dict[int, Node]:
        return {n.id: n for n in self.nodes}

    def consumers(self) -> dict[int, list[int]]:
        cons: dict[int, list[int]] = {n.id: [] for n in self.nodes}
        for n in self.nodes:
            for i in n.inputs:
                cons[i].append(n.id)
        return cons

    def output_ids(self) -> set[int]:
        return set(self.outputs.values())

    def buffer_names(self) -> set[str]:
        names = set()
        for n in self.nodes:
            for k in BUFFER_ATTRS.get(n.op, ()):
                names.add(n.attrs[k])
        return names

    def trainable_names(self) -> list[str]:
        buffers = self.buffer_names()
        seen, out = set(), []
        for n in self.nodes:
            for w in n.weight_names():
                if w not in buffers and w not in seen:
                    seen.add(w)
                    out.append(w)
        return out

    def copy(self) -> "Graph":
        """Copy the structure; weight arrays are shared (treated as immutable)."""
        return Graph([replace(n, attrs=dict(n.attrs)) for n in self.nodes],
                     dict(self.inputs), dict(self.outputs), dict(self.weights),
                     self.dtype, copy.deepcopy(self.meta))

    def validate(self) -> None:
        seen: set[int] = set()
        for n in self.nodes:
            if n.op not in OPS:
                raise ConfigurationError(f"node {n.name or n.id}: unknown op {n.op!r}")
            if n.id in seen:
                raise ConfigurationError(f"node id {n.id} produced twice")
            for i in n.inputs:
                if i not in seen:
                    raise ConfigurationError(
                        f"node {n.name or n.id} consumes value {i} before it is produced")
            for w in n.weight_names():
                if w not in self.weights:
                    raise ConfigurationError(f"node {n.name or n.id}: missing weight {w!r}")
            seen.add(n.id)
        for name, i in {**self.inputs, **self.outputs}.items():
            if i not in seen:
                raise ConfigurationError(f"graph endpoint {name!r} refers to unknown node {i}")


# ---------------------------------------------------------------- shapes

def infer_node_shape(node: Node, in_shapes: list[tuple]) -> tuple:
    op, a = node.op, node.attrs
    label = node.name or f"#{node.id}"
    if op == "input":
        return tuple(a["shape"])
    x = in_shapes[0]
    if op == "conv2d":
        spec: ConvSpec = a["spec"]
        if x[1] != spec.in_channels:
            raise ConfigurationError(
                f"node {label}: conv expects {spec.in_channels} channels, input has shape {x}")
        return spec.output_shape(x)
    if op in ("batchnorm", "relu", "sigmoid"):
        return x
    if op in ("maxpool2d", "avgpool2d"):
        if op == "avgpool2d" and a.get("require_divisor"):
            if x[2] % a["window_h"] or x[3] % a["window_w"]:
                raise FactorViolationError(
                    f"node {label}: pooling window {a['window_h']}x{a['window_w']} "
                    f"does not divide feature map {x[2]}x{x[3]}")
        ho, wo = K.pool_out_hw(x[2], x[3], a["window_h"], a["window_w"], a["stride_h"],
                               a["stride_w"], a.get("pad_h", 0), a.get("pad_w", 0))
        return (x[0], x[1], ho, wo)
    if op == "global_avg_pool":
        return (x[0], x[1], 1, 1)
    if op in ("nearest_upsample", "bilinear_upsample"):
        fh, fw = K.upsample_factors(a["factor"])
        return (x[0], x[1], x[2] * fh, x[3] * fw)
    if op == "add":
        if in_shapes[0] != in_shapes[1]:
            raise ConfigurationError(
                f"node {label}: add shape conflict {in_shapes[0]} vs {in_shapes[1]}")
        return x
    if op == "concat":
        for s in in_shapes[1:]:
            if s[0] != x[0] or s[2:] != x[2:]:
                raise ConfigurationError(f"node {label}: concat shape conflict {x} vs {s}")
        return (x[0], sum(s[1] for s in in_shapes), x[2], x[3])
    if op == "scale_channels":
        if in_shapes[1] != (x[0], x[1], 1, 1):
            raise ConfigurationError(
                f"node {label}: gate shape {in_shapes[1]} does not fit features {x}")
        return x
    raise ConfigurationError(f"node {label}: unknown op {op!r}")


def infer_shapes(graph: Graph, input_shapes: dict[str, tuple] | None = None) -> Graph:
    """Return a copy of ``graph`` with every node's output shape annotated."""
    g = graph.copy()
    input_shapes = input_shapes or {}
    by_id = {}
    for n in g.nodes:
        if n.op == "input" and n.attrs["name"] in input_shapes:
            n.attrs["shape"] = tuple(input_shapes[n.attrs["name"]])
        n.shape = infer_node_shape(n, [by_id[i].shape for i in n.inputs])
        by_id[n.id] = n
    return g


# ---------------------------------------------------------------- execution

def _run_node(node: Node, args, weights):
    op, a = node.op, node.attrs
    if op == "conv2d":
        b = weights[a["bias"]] if a.get("bias") else None
        return K.conv2d(args[0], weights[a["weight"]], b, a["spec"], a.get("act"))
    if op == "batchnorm":
        return K.batchnorm_infer(args[0], weights[a["gamma"]], weights[a["beta"]],
                                 weights[a["mean"]], weights[a["var"]], a.get("eps", K.BN_EPS))
    if op == "relu":
        return K.relu(args[0])
    if op == "sigmoid":
        return K.sigmoid(args[0])
    if op == "maxpool2d":
        return K.maxpool2d(args[0], a["window_h"], a["window_w"], a["stride_h"], a["stride_w"],
                           a.get("pad_h", 0), a.get("pad_w", 0))
    if op == "avgpool2d":
        return K.avgpool2d(args[0], a["window_h"], a["window_w"], a["stride_h"], a["stride_w"],
                           a.get("require_divisor", False))
    if op == "global_avg_pool":
        return K.global_avg_pool(args[0])
    if op == "nearest_upsample":
        return K.nearest_upsample(args[0], a["factor"])
    if op == "bilinear_upsample":
        return K.bilinear_upsample(args[0], a["factor"])
    if op == "add":
        out = K.add(args[0], args[1])
        return K.relu(out) if a.get("act") == "relu" else out
    if op == "concat":
        return K.concat_channels(args)
    if op == "scale_channels":
        return K.scale_channels(args[0], args[1])
    raise ConfigurationError(f"cannot execute op {op!r}")


def _bind_inputs(graph: Graph, inputs: dict):
    dtype = resolve_dtype(graph.dtype)
    env = {}
    for name, nid in graph.inputs.items():
        if name not in inputs:
            raise UsageError(f"missing graph input {name!r}")
        env[nid] = np.ascontiguousarray(inputs[name], dtype=dtype)
    return env


def execute(graph: Graph, inputs: dict, outputs=None) -> dict[str, np.ndarray]:
    """Evaluate the graph in inference mode, node by node in list order."""
    env = _bind_inputs(graph, inputs)
    want = dict(graph.outputs) if outputs is None else {k: graph.outputs[k] for k in outputs}
    keep = set(want.values())
    last_use: dict[int, int] = {}
    for pos, n in enumerate(graph.nodes):
        for i in n.inputs:
            last_use[i] = pos
    for pos, n in enumerate(graph.nodes):
        if n.op == "input":
            continue
        for w in n.weight_names():
            if w not in graph.weights:
                raise UsageError(f"node {n.name or n.id}: missing weight {w!r}")
        args = [env[i] for i in n.inputs]
        env[n.id] = _run_node(n, args, graph.weights)
        for i in set(n.inputs):
            if last_use.get(i) == pos and i not in keep:
                env.pop(i, None)
    return {k: env[v] for k, v in want.items()}


def trace(graph: Graph, tape, inputs: dict, training: bool = True):
    """Replay the graph onto an autodiff tape.

    Trainable weights become named leaves.  In training mode batch norm uses
    batch statistics; the updated running statistics are returned alongside
    the output value ids: ``(outputs, running_updates)``.
    """
    env = {nid: tape.leaf(arr, requires_grad=False)
           for nid, arr in _bind_inputs(graph, inputs).items()}
    buffers = graph.buffer_names()
    leaves: dict[str, int] = {}

    def leaf(name):
        if name not in leaves:
            leaves[name] = tape.leaf(graph.weights[name], name=name,
                                     requires_grad=name not in buffers)
        return leaves[name]

    updates: dict[str, np.ndarray] = {}
    for n in graph.nodes:
        if n.op == "input":
            continue
        a = n.attrs
        xs = [env[i] for i in n.inputs]
        if n.op == "conv2d":
            ins = xs + [leaf(a["weight"])] + ([leaf(a["bias"])] if a.get("bias") else [])
            out = tape.apply("conv2d", ins, spec=a["spec"], act=a.get("act"))
        elif n.op == "batchnorm":
            mean, var = graph.weights[a["mean"]], graph.weights[a["var"]]
            op = "batchnorm_train" if training else "batchnorm_infer"
            out = tape.apply(op, xs + [leaf(a["gamma"]), leaf(a["beta"])],
                             running_mean=mean, running_var=var,
                             eps=a.get("eps", K.BN_EPS), momentum=a.get("momentum", K.BN_MOMENTUM))
            if training:
                new_mean, new_var = tape.records[-1].ctx["running"]
                updates[a["mean"]] = new_mean.astype(mean.dtype)
                updates[a["var"]] = new_var.astype(var.dtype)
        elif n.op in ("maxpool2d", "avgpool2d"):
            keys = ("window_h", "window_w", "stride_h", "stride_w", "pad_h", "pad_w",
                    "require_divisor")
            out = tape.apply(n.op, xs, **{k: a[k] for k in keys if k in a})
        elif n.op in ("nearest_upsample", "bilinear_upsample"):
            out = tape.apply(n.op, xs, factor=a["factor"])
        elif n.op == "add":
            out = tape.apply("add", xs, act=a.get("act"))
        else:
            out = tape.apply(n.op, xs)
        env[n.id] = out
    return {k: env[v] for k, v in graph.outputs.items()}, updates


# ---------------------------------------------------------------- building

class GraphBuilder:
    """Imperative construction of a :class:`Graph` with eager shape checks.

    Weights are created as nodes are added, drawn from ``rng``.  Names are
    prefixed by the active :meth:`scope`; nodes are labelled with the active
    :meth:`stage` for cost breakdowns.
    """

    def __init__(self, seed: int = 0, dtype="f32"):
        self.rng = np.random.default_rng(seed)
        self.dtype = "f64" if resolve_dtype(dtype) == np.float64 else "f32"
        self.nodes: list[Node] = []
        self.shapes: dict[int, tuple] = {}
        self.inputs: dict[str, int] = {}
        self.outputs: dict[str, int] = {}
        self.weights: dict[str, np.ndarray] = {}
        self._scope: list[str] = []
        self._stage = ""

    @contextlib.contextmanager
    def scope(self, name: str):
        self._scope.append(name)
        try:
            yield
        finally:
            self._scope.pop()

    @contextlib.contextmanager
    def stage(self, label: str):
        prev, self._stage = self._stage, label
        try:
            yield
        finally:
            self._stage = prev

    def _name(self, leaf: str) -> str:
        return ".".join(self._scope + [leaf])

    def shape(self, x: int) -> tuple:
        return self.shapes[x]

    def _add(self, op, inputs, attrs, name):
        node = Node(len(self.nodes), op, tuple(inputs), attrs,
                    name=self._name(name), stage=self._stage)
        node.shape = infer_node_shape(node, [self.shapes[i] for i in inputs])
        self.nodes.append(node)
        self.shapes[node.id] = node.shape
        return node.id

    def _weight(self, leaf, arr):
        name = self._name(leaf)
        if name in self.weights:
            raise ConfigurationError(f"duplicate weight name {name!r}")
        self.weights[name] = np.ascontiguousarray(arr, dtype=resolve_dtype(self.dtype))
        return name

    def input(self, name, shape):
        nid = self._add("input", (), {"name": name, "shape": tuple(shape)}, name)
        self.inputs[name] = nid
        return nid

    def output(self, name, x):
        self.outputs[name] = x

    def conv(self, x, cout, kh, kw=None, stride=1, pad=None, groups=1, bias=False,
             name="conv", init="he"):
        kw = kh if kw is None else kw
        sh, sw = (stride, stride) if np.isscalar(stride) else stride
        ph, pw = (kh // 2, kw // 2) if pad is None else ((pad, pad) if np.isscalar(pad) else pad)
        cin = self.shapes[x][1]
        spec = ConvSpec(cin, cout, kh, kw, sh, sw, ph, pw, groups, bias)
        w = self._weight(f"{name}.weight", init_conv_weight(spec, init, self.rng))
        b = self._weight(f"{name}.bias", np.zeros(cout)) if bias else None
        return self._add("conv2d", [x], {"spec": spec, "weight": w, "bias": b, "act": None,
                                         "init": init}, name)

    def bn(self, x, name="bn"):
        c = self.shapes[x][1]
        attrs = {"gamma": self._weight(f"{name}.gamma", np.ones(c)),
                 "beta": self._weight(f"{name}.beta", np.zeros(c)),
                 "mean": self._weight(f"{name}.running_mean", np.zeros(c)),
                 "var": self._weight(f"{name}.running_var", np.ones(c)),
                 "eps": K.BN_EPS, "momentum": K.BN_MOMENTUM}
        return self._add("batchnorm", [x], attrs, name)

    def relu(self, x, name="relu"):
        return self._add("relu", [x], {}, name)

    def sigmoid(self, x, name="sigmoid"):
        return self._add("sigmoid", [x], {}, name)

    def maxpool(self, x, k, stride, pad=0, name="maxpool"):
        return self._add("maxpool2d", [x], {"window_h": k, "window_w": k, "stride_h": stride,
                                            "stride_w": stride, "pad_h": pad, "pad_w": pad}, name)

    def avgpool(self, x, wh, ww, require_divisor=True, name="avgpool"):
        return self._add("avgpool2d", [x], {"window_h": wh, "window_w": ww, "stride_h": wh,
                                            "stride_w": ww, "require_divisor": require_divisor},
                         name)

    def global_avg_pool(self, x, name="gap"):
        return self._add("global_avg_pool", [x], {}, name)

    def nearest(self, x, factor, name="nearest"):
        fh, fw = K.upsample_factors(factor)
        return self._add("nearest_upsample", [x], {"factor": fh if fh == fw else [fh, fw]}, name)

    def bilinear(self, x, factor, name="bilinear"):
        fh, fw = K.upsample_factors(factor)
        return self._add("bilinear_upsample", [x], {"factor": fh if fh == fw else [fh, fw]}, name)

    def add(self, x, y, name="add"):
        return self._add("add", [x, y], {"act": None}, name)

    def concat(self, xs, name="concat"):
        return self._add("concat", list(xs), {}, name)

    def scale(self, x, gate, name="scale"):
        return self._add("scale_channels", [x, gate], {}, name)

    def build(self) -> Graph:
        g = Graph(list(self.nodes), dict(self.inputs), dict(self.outputs), dict(self.weights),
                  self.dtype)
        g.validate()
        return g


def init_conv_weight(spec: ConvSpec, init: str, rng) -> np.ndarray:
    shape = spec.weight_shape
    if init == "he":
        fan_in = shape[1] * shape[2] * shape[3]
        return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
    if init == "bilinear":
        if spec.groups != spec.in_channels or shape[1:] != (1, 3, 3):
            raise ConfigurationError("bilinear init needs a depthwise 3x3 conv")
        return np.broadcast_to(K.bilinear_kernel_3x3(), shape).copy()
    if init == "zero":
        return np.zeros(shape)
    raise ConfigurationError(f"unknown conv init {init!r}")


def init_weights(graph: Graph, seed: int) -> Graph:
    """Re-initialize every weight deterministically from ``seed``.

    Conv weights are He-normal over fan-in (or the bilinear / zero kernel
    the node was built with), biases 0, BN gamma 1 and beta 0, running
    statistics mean 0 and variance 1.
    """
    g = graph.copy()
    rng = np.random.default_rng(seed)
    dtype = resolve_dtype(g.dtype)
    for n in g.nodes:
        a = n.attrs
        if n.op == "conv2d":
            g.weights[a["weight"]] = init_conv_weight(a["spec"], a.get("init", "he"),
                                                      rng).astype(dtype)
            if a.get("bias"):
                g.weights[a["bias"]] = np.zeros(a["spec"].out_channels, dtype=dtype)
        elif n.op == "batchnorm":
            c = g.weights[a["gamma"]].shape[0]
            g.weights[a["gamma"]] = np.ones(c, dtype=dtype)
            g.weights[a["beta"]] = np.zeros(c, dtype=dtype)
            g.weights[a["mean"]] = np.zeros(c, dtype=dtype)
            g.weights[a["var"]] = np.ones(c, dtype=dtype)
    return g


def with_dtype(graph: Graph, dtype) -> Graph:
    """Copy of ``graph`` whose weights are cast to ``dtype``."""
    g = graph.copy()
    dt = resolve_dtype(dtype)
    g.dtype = "f64" if dt == np.float64 else "f32"
    g.weights = {k: v.astype(dt) for k, v in g.weights.items()}
    return g
