"""On-disk graph format.

A graph directory holds ``graph.txt`` and a ``weights/`` sidecar with one
``.estn`` container per weight.  ``graph.txt`` is line oriented::

    esanet-graph 1
    dtype f32
    meta {"config": ...}
    input rgb 3
    output logits 812
    node <id> <op> <stage> <inputs,comma,separated|-> <name> <json attrs>
    weight <name> <relative file>

Node attributes are JSON; a conv's spec is stored as a nested object.
"""
from __future__ import annotations

import json
from pathlib import Path

from .. import tensor_io
from ..errors import ConfigurationError
from ..tensor import ConvSpec
from .ir import Graph, Node, infer_shapes

FORMAT = "esanet-graph"
VERSION = 1


def _attrs_to_json(attrs: dict) -> str:
    out = {}
    for k, v in attrs.items():
        if isinstance(v, ConvSpec):
            v = {"__convspec__": v.to_dict()}
        elif isinstance(v, tuple):
            v = list(v)
        out[k] = v
    return json.dumps(out, sort_keys=True, separators=(",", ":"))


def _attrs_from_json(text: str) -> dict:
    attrs = json.loads(text)
    for k, v in attrs.items():
        if isinstance(v, dict) and "__convspec__" in v:
            attrs[k] = ConvSpec(**v["__convspec__"])
        elif k == "shape":
            attrs[k] = tuple(v)
    return attrs


def _weight_file(name: str) -> str:
    return name.replace("/", "_") + ".estn"


def save_graph(graph: Graph, directory) -> Path:
    d = Path(directory)
    (d / "weights").mkdir(parents=True, exist_ok=True)
    lines = [f"{FORMAT} {VERSION}", f"dtype {graph.dtype}",
             f"meta {json.dumps(graph.meta, sort_keys=True)}"]
    lines += [f"input {k} {v}" for k, v in graph.inputs.items()]
    lines += [f"output {k} {v}" for k, v in graph.outputs.items()]
    for n in graph.nodes:
        ins = ",".join(map(str, n.inputs)) or "-"
        lines.append(f"node {n.id} {n.op} {n.stage or '-'} {ins} {n.name or '-'} "
                     f"{_attrs_to_json(n.attrs)}")
    for name in sorted(graph.weights):
        rel = f"weights/{_weight_file(name)}"
        tensor_io.save(d / rel, graph.weights[name])
        lines.append(f"weight {name} {rel}")
    (d / "graph.txt").write_text("\n".join(lines) + "\n")
    return d


def load_graph(directory) -> Graph:
    d = Path(directory)
    manifest = d / "graph.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"graph manifest not found: {manifest}")
    lines = manifest.read_text().splitlines()
    head = lines[0].split()
    if len(head) != 2 or head[0] != FORMAT:
        raise ConfigurationError(f"{manifest}: not an {FORMAT} manifest")
    if int(head[1]) != VERSION:
        raise ConfigurationError(f"{manifest}: unsupported version {head[1]}")
    dtype, meta = "f32", {}
    inputs, outputs, weights, nodes = {}, {}, {}, []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        kind, _, rest = line.partition(" ")
        if kind == "dtype":
            dtype = rest.strip()
        elif kind == "meta":
            meta = json.loads(rest)
        elif kind == "input":
            k, v = rest.split()
            inputs[k] = int(v)
        elif kind == "output":
            k, v = rest.split()
            outputs[k] = int(v)
        elif kind == "node":
            nid, op, stage, ins, name, attrs = rest.split(" ", 5)
            nodes.append(Node(int(nid), op,
                              tuple() if ins == "-" else tuple(int(i) for i in ins.split(",")),
                              _attrs_from_json(attrs), None,
                              "" if name == "-" else name, "" if stage == "-" else stage))
        elif kind == "weight":
            name, rel = rest.rsplit(" ", 1)
            weights[name] = tensor_io.load(d / rel)
        else:
            raise ConfigurationError(f"{manifest}:{lineno}: unknown record {kind!r}")
    g = Graph(nodes, inputs, outputs, weights, dtype, meta)
    g.validate()
    return infer_shapes(g)
