"""Parameter and multiply-accumulate accounting."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .ir import Graph, infer_shapes


@dataclass
class StageCost:
    parameter_count: int = 0
    conv_parameter_count: int = 0
    mac_count: int = 0
    conv_mac_count: int = 0
    node_count: int = 0


@dataclass
class CostReport:
    parameter_count: int
    mac_count: int
    node_count: int
    conv_parameter_count: int
    conv_mac_count: int
    stages: dict[str, StageCost] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    def to_text(self) -> str:
        lines = [f"{'stage':<12}{'nodes':>7}{'params':>14}{'conv params':>14}"
                 f"{'MACs':>16}{'conv MACs':>16}"]
        for name, s in self.stages.items():
            lines.append(f"{name:<12}{s.node_count:>7}{s.parameter_count:>14,}"
                         f"{s.conv_parameter_count:>14,}{s.mac_count:>16,}{s.conv_mac_count:>16,}")
        lines.append(f"{'total':<12}{self.node_count:>7}{self.parameter_count:>14,}"
                     f"{self.conv_parameter_count:>14,}{self.mac_count:>16,}"
                     f"{self.conv_mac_count:>16,}")
        return "\n".join(lines)


def node_macs(node, in_shapes) -> int:
    """MACs per batch element.  Elementwise and pooling ops count one per element."""
    if node.op == "input":
        return 0
    _, c, h, w = node.shape
    if node.op == "conv2d":
        s = node.attrs["spec"]
        return s.kernel_h * s.kernel_w * (s.in_channels // s.groups) * s.out_channels * h * w
    if node.op in ("maxpool2d", "avgpool2d", "global_avg_pool"):
        _, ci, hi, wi = in_shapes[0]
        return ci * hi * wi
    return c * h * w


def count_costs(graph: Graph) -> CostReport:
    if any(n.shape is None for n in graph.nodes):
        graph = infer_shapes(graph)
    by_id = graph.node_map()
    buffers = graph.buffer_names()
    stages: dict[str, StageCost] = {}
    counted: set[str] = set()
    for n in graph.nodes:
        st = stages.setdefault(n.stage or "-", StageCost())
        if n.op != "input":
            st.node_count += 1
        macs = node_macs(n, [by_id[i].shape for i in n.inputs])
        st.mac_count += macs
        if n.op == "conv2d":
            st.conv_mac_count += macs
        for wname in n.weight_names():
            if wname in buffers or wname in counted:
                continue
            counted.add(wname)
            size = int(np.prod(graph.weights[wname].shape))
            st.parameter_count += size
            if n.op == "conv2d" and wname == n.attrs["weight"]:
                st.conv_parameter_count += size
    stages = {k: v for k, v in stages.items() if v.node_count or v.parameter_count}
    total = lambda f: sum(getattr(s, f) for s in stages.values())  # noqa: E731
    return CostReport(total("parameter_count"), total("mac_count"), total("node_count"),
                      total("conv_parameter_count"), total("conv_mac_count"), stages)
