from .bench import BenchReport, Timing, benchmark, random_inputs
from .cost import CostReport, StageCost, count_costs
from .ir import (Graph, GraphBuilder, Node, execute, infer_shapes, init_weights, trace,
                 with_dtype)
from .passes import eliminate_dead, fold_batchnorm, fuse_relu, optimize
from .serialize import load_graph, save_graph

__all__ = [
    "BenchReport", "CostReport", "Graph", "GraphBuilder", "Node", "StageCost", "Timing",
    "benchmark", "count_costs", "eliminate_dead", "execute", "fold_batchnorm", "fuse_relu",
    "infer_shapes", "init_weights", "load_graph", "optimize", "random_inputs", "save_graph",
    "trace", "with_dtype",
]
