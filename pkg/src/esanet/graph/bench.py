"""Wall-clock timing of graph execution."""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass

import numpy as np

from ..errors import UsageError
from .ir import Graph, execute


@dataclass
class Timing:
    median: float
    p10: float
    p90: float
    reps: int

    def to_text(self) -> str:
        return (f"median {self.median * 1e3:.2f} ms  p10 {self.p10 * 1e3:.2f} ms  "
                f"p90 {self.p90 * 1e3:.2f} ms  ({self.reps} reps)")


@dataclass
class BenchReport:
    baseline: Timing
    optimized: Timing | None = None

    @property
    def speedup(self) -> float | None:
        if self.optimized is None:
            return None
        return self.baseline.median / self.optimized.median

    def to_text(self) -> str:
        lines = [f"baseline : {self.baseline.to_text()}"]
        if self.optimized is not None:
            lines.append(f"optimized: {self.optimized.to_text()}")
            lines.append(f"speedup  : {self.speedup:.3f}x")
        return "\n".join(lines)

    def to_json(self) -> str:
        d = asdict(self)
        d["speedup"] = self.speedup
        return json.dumps(d, indent=2)


def random_inputs(graph: Graph, batch: int | None = None, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    out = {}
    for name, nid in graph.inputs.items():
        shape = list(graph.node_map()[nid].attrs["shape"])
        if batch is not None:
            shape[0] = batch
        out[name] = rng.standard_normal(shape)
    return out


def time_graph(graph: Graph, inputs: dict, reps: int = 5, warmup: int = 2) -> Timing:
    if reps < 5 or warmup < 2:
        raise UsageError("benchmark needs reps >= 5 and warmup >= 2")
    for _ in range(warmup):
        execute(graph, inputs)
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        execute(graph, inputs)
        times.append(time.perf_counter() - t0)
    t = np.array(times)
    return Timing(float(np.median(t)), float(np.percentile(t, 10)),
                  float(np.percentile(t, 90)), reps)


def benchmark(graph: Graph, inputs: dict | None = None, reps: int = 5, warmup: int = 2,
              optimized: Graph | None = None) -> BenchReport:
    """Time ``graph`` (and optionally an optimized twin on the same inputs).

    When both graphs are given their repetitions are interleaved so slow
    drifts of the machine affect both equally.
    """
    inputs = inputs if inputs is not None else random_inputs(graph)
    if optimized is None:
        return BenchReport(time_graph(graph, inputs, reps, warmup))
    if reps < 5 or warmup < 2:
        raise UsageError("benchmark needs reps >= 5 and warmup >= 2")
    for _ in range(warmup):
        execute(graph, inputs)
        execute(optimized, inputs)
    base, opt = [], []
    for _ in range(reps):
        for g, acc in ((graph, base), (optimized, opt)):
            t0 = time.perf_counter()
            execute(g, inputs)
            acc.append(time.perf_counter() - t0)

    def summary(t):
        t = np.array(t)
        return Timing(float(np.median(t)), float(np.percentile(t, 10)),
                      float(np.percentile(t, 90)), reps)
    return BenchReport(summary(base), summary(opt))
