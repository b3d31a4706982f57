"""Toy RGB-D vs RGB and ablation runs, seed by seed.

Runs every variant for one seed before moving to the next seed, so an
interrupted job still leaves complete comparisons.  Finished runs are
skipped on restart.

    python3 benchmarks/toy_experiment.py --out runs/toy [--epochs 300]
"""
import argparse
import json
import time

from esanet.experiments import SEEDS, VARIANTS, median_miou, run_toy_experiment


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--seeds", type=int, nargs="+", default=list(SEEDS))
    p.add_argument("--variants", nargs="+", default=list(VARIANTS), choices=list(VARIANTS))
    args = p.parse_args(argv)

    t0 = time.time()

    def report(rec):
        print(f"[{(time.time() - t0) / 3600:6.2f} h] {rec['variant']:<13} seed {rec['seed']}  "
              f"best val mIoU {rec['best_miou']:.4f} (epoch {rec['best_epoch']})", flush=True)

    for s in args.seeds:
        run_toy_experiment(args.out, args.variants, (s,), args.epochs, progress=report)
    res = run_toy_experiment(args.out, args.variants, args.seeds, args.epochs)
    print(json.dumps({v: median_miou(r) for v, r in res.items()}, indent=2))


if __name__ == "__main__":
    main()
