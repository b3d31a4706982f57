"""Compiled vs numpy kernel timings.

Times each hot loop of the kernel backend on shapes taken from the mini and
full-size networks, then a whole forward pass and a training step of the
mini model under each backend.

    python3 benchmarks/bench_kernels.py [--reps 20] [--json out.json]
"""
import argparse
import json
import statistics
import timeit

import numpy as np

from esanet import data as D
from esanet.graph import execute, random_inputs
from esanet.kernels import backend
from esanet.model import ESANetConfig, build_esanet
from esanet.train import TrainConfig, make_inputs, train_step


def kernel_cases(rng):
    x = rng.standard_normal((8, 64, 32, 32)).astype(np.float32)
    big = rng.standard_normal((1, 64, 240, 320)).astype(np.float32)
    ho = wo = 32
    cols = rng.standard_normal((64 * 9, 8 * ho * wo)).astype(np.float32)
    pooled, arg = backend.python_impl.maxpool_forward(big, 3, 3, 2, 2, 1, 1, 120, 160)
    g_up = rng.standard_normal((8, 64, 64, 64)).astype(np.float32)
    return {
        "im2col 3x3 8x64x32x32": lambda m: m.im2col(x, 3, 3, 1, 1, 1, 1, ho, wo),
        "col2im 3x3 8x64x32x32": lambda m: m.col2im(cols, x.shape, 3, 3, 1, 1, 1, 1, ho, wo),
        "maxpool fwd 64x240x320": lambda m: m.maxpool_forward(big, 3, 3, 2, 2, 1, 1, 120, 160),
        "maxpool bwd 64x240x320": lambda m: m.maxpool_backward(pooled, arg, big.shape),
        "nearest x2 8x64x32x32": lambda m: m.nearest_upsample(x, 2, 2),
        "nearest adj 8x64x64x64": lambda m: m.nearest_upsample_adjoint(g_up, 2, 2),
    }


def best_of(fn, reps):
    return min(timeit.repeat(fn, number=1, repeat=reps))


def model_cases():
    cfg = ESANetConfig(backbone="r18", num_classes=4, input_height=64, input_width=64)
    g = build_esanet(cfg)
    inp = random_inputs(g, 8, seed=0)
    spec = D.ToyDatasetSpec(train_samples=8, val_samples=0)
    samples = [D.generate_toy_rgbd(spec, "train", i) for i in range(8)]
    stats = D.compute_stats(samples)
    batch = make_inputs(samples, stats, g.inputs)
    labels = np.concatenate([s.labels for s in samples])
    tcfg = TrainConfig()

    def step():
        # a fresh copy keeps every repetition on the same weights
        train_step(g.copy(), batch, labels, np.ones(4), {}, 1e-3, tcfg)

    return {"mini forward batch 8": lambda: execute(g, inp),
            "mini train step batch 8": step}


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--reps", type=int, default=20)
    p.add_argument("--model-reps", type=int, default=3)
    p.add_argument("--json", help="write results here")
    args = p.parse_args(argv)
    if backend.compiled_impl is None:
        raise SystemExit("compiled kernels are not built; run `pip install -e .` first")

    rows = []
    impls = {"python": backend.python_impl, "compiled": backend.compiled_impl}
    for name, fn in kernel_cases(np.random.default_rng(0)).items():
        t = {k: best_of(lambda m=m: fn(m), args.reps) for k, m in impls.items()}
        rows.append((name, t["python"], t["compiled"]))
    previous = backend.NAME
    try:
        for name, fn in model_cases().items():
            t = {}
            for k in impls:
                backend.use(k)
                fn()  # warm caches
                t[k] = statistics.median(timeit.repeat(fn, number=1, repeat=args.model_reps))
            rows.append((name, t["python"], t["compiled"]))
    finally:
        backend.use(previous)

    print(f"{'case':<28}{'numpy ms':>12}{'compiled ms':>14}{'speedup':>10}")
    for name, py, cc in rows:
        print(f"{name:<28}{py * 1e3:>12.2f}{cc * 1e3:>14.2f}{py / cc:>9.2f}x")
    if args.json:
        with open(args.json, "w") as f:
            json.dump([{"case": n, "python_s": a, "compiled_s": b} for n, a, b in rows], f,
                      indent=2)


if __name__ == "__main__":
    main()
