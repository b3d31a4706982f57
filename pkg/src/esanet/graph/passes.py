"""Inference-time graph rewrites.

Each pass returns a new :class:`Graph`; the input graph is left untouched.
Fusions only fire across single-consumer edges whose producer is not itself
a graph output.
"""
from __future__ import annotations

import numpy as np

from ..tensor import ConvSpec, resolve_dtype
from .ir import Graph, Node


def _rewire(graph: Graph, old: int, new: int) -> None:
    for n in graph.nodes:
        if old in n.inputs:
            n.inputs = tuple(new if i == old else i for i in n.inputs)
    for k, v in graph.outputs.items():
        if v == old:
            graph.outputs[k] = new


def _fusable_producer(graph: Graph, by_id, consumers, node: Node, ops) -> Node | None:
    if len(node.inputs) != 1:
        return None
    prod = by_id[node.inputs[0]]
    if prod.op not in ops or prod.attrs.get("act"):
        return None
    if consumers[prod.id] != [node.id] or prod.id in graph.output_ids():
        return None
    return prod


def fold_batchnorm(graph: Graph) -> Graph:
    """Merge inference-mode batch norm into the convolution feeding it."""
    g = graph.copy()
    dtype = resolve_dtype(g.dtype)
    consumers = g.consumers()
    by_id = g.node_map()
    removed: set[int] = set()
    for bn in list(g.nodes):
        if bn.op != "batchnorm":
            continue
        conv = _fusable_producer(g, by_id, consumers, bn, ("conv2d",))
        if conv is None:
            continue
        a, ca = bn.attrs, conv.attrs
        spec: ConvSpec = ca["spec"]
        gamma = g.weights[a["gamma"]].astype(np.float64)
        beta = g.weights[a["beta"]].astype(np.float64)
        mean = g.weights[a["mean"]].astype(np.float64)
        var = g.weights[a["var"]].astype(np.float64)
        scale = gamma / np.sqrt(var + a.get("eps", 1e-5))
        w = g.weights[ca["weight"]].astype(np.float64)
        b = g.weights[ca["bias"]].astype(np.float64) if ca.get("bias") else np.zeros(len(scale))
        g.weights[ca["weight"]] = (w * scale[:, None, None, None]).astype(dtype)
        bias_name = ca.get("bias") or f"{ca['weight'].rsplit('.', 1)[0]}.bias"
        while bias_name in g.weights and not ca.get("bias"):
            bias_name += "_folded"
        g.weights[bias_name] = ((b - mean) * scale + beta).astype(dtype)
        ca["bias"] = bias_name
        ca["spec"] = ConvSpec(**{**spec.to_dict(), "has_bias": True})
        _rewire(g, bn.id, conv.id)
        consumers[conv.id] = consumers[bn.id]
        removed.add(bn.id)
    g.nodes = [n for n in g.nodes if n.id not in removed]
    return _drop_unused_weights(g)


def fuse_relu(graph: Graph) -> Graph:
    """Absorb a ReLU into the conv or add that produces its input."""
    g = graph.copy()
    consumers = g.consumers()
    by_id = g.node_map()
    removed: set[int] = set()
    for r in list(g.nodes):
        if r.op != "relu":
            continue
        prod = _fusable_producer(g, by_id, consumers, r, ("conv2d", "add"))
        if prod is None:
            continue
        prod.attrs["act"] = "relu"
        _rewire(g, r.id, prod.id)
        consumers[prod.id] = consumers[r.id]
        removed.add(r.id)
    g.nodes = [n for n in g.nodes if n.id not in removed]
    return g


def eliminate_dead(graph: Graph) -> Graph:
    """Remove nodes that no output depends on (graph inputs are kept)."""
    g = graph.copy()
    by_id = g.node_map()
    live = set(g.outputs.values())
    stack = list(live)
    while stack:
        for i in by_id[stack.pop()].inputs:
            if i not in live:
                live.add(i)
                stack.append(i)
    live |= set(g.inputs.values())
    g.nodes = [n for n in g.nodes if n.id in live]
    return _drop_unused_weights(g)


def _drop_unused_weights(g: Graph) -> Graph:
    used = {w for n in g.nodes for w in n.weight_names()}
    g.weights = {k: v for k, v in g.weights.items() if k in used}
    return g


PASSES = {"fold_batchnorm": fold_batchnorm, "fuse_relu": fuse_relu,
          "eliminate_dead": eliminate_dead}


def optimize(graph: Graph, passes=("eliminate_dead", "fold_batchnorm", "fuse_relu")) -> Graph:
    for name in passes:
        graph = PASSES[name](graph)
    return graph
