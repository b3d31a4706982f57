"""``esanet`` command-line entry point.

Exit status is 0 on success, 1 when a check fails (verify, optimize
equivalence) and 2 on configuration or usage errors.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ESANetError

SECTIONS = ("model", "train", "data")


def _parse_overrides(items) -> dict[str, str]:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        k, v = (s.strip() for s in item.split("=", 1))
        out[k] = v
    return out


def _split_overrides(overrides: dict, sections) -> dict[str, dict]:
    """Route ``key=value`` (or ``section.key=value``) to the config sections owning it.

    An unprefixed key is applied to every listed section that defines it.
    """
    from .data import ToyDatasetSpec
    from .model import ESANetConfig
    from .train import TrainConfig
    classes = {"model": ESANetConfig, "train": TrainConfig, "data": ToyDatasetSpec}
    fields = {s: {f.name for f in dataclasses.fields(classes[s])} for s in sections}
    routed = {s: {} for s in sections}
    for key, value in overrides.items():
        sec, _, name = key.rpartition(".")
        if sec:
            if sec not in fields:
                raise ConfigurationError(f"--set {key}: unknown section {sec!r}; "
                                         f"expected one of {list(sections)}")
            if name not in fields[sec]:
                raise ConfigurationError(f"--set {key}: unknown {sec} config key {name!r}")
            routed[sec][name] = value
            continue
        owners = [s for s in sections if key in fields[s]]
        if not owners:
            raise ConfigurationError(f"--set {key}: unknown config key {key!r}")
        for s in owners:
            routed[s][key] = value
    return routed


def _model_config(args, overrides):
    from .model import ESANetConfig, coerce_fields, parse_kv
    values = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        values = parse_kv(path.read_text(), str(path))
    values.update(overrides)
    if args.seed is not None:
        values["seed"] = args.seed
    return ESANetConfig(**coerce_fields(ESANetConfig, values, args.config or "<config>"))


def _train_config(args, overrides):
    from .model import coerce_fields, parse_kv
    from .train import TrainConfig
    values = {}
    if getattr(args, "train_config", None):
        path = Path(args.train_config)
        if not path.exists():
            raise FileNotFoundError(f"train config file not found: {path}")
        values = parse_kv(path.read_text(), str(path))
    values.update(overrides)
    if args.seed is not None:
        values["seed"] = args.seed
    return TrainConfig(**coerce_fields(TrainConfig, values, "<train config>"))


def _data_spec(args, overrides, base=None):
    from .data import ToyDatasetSpec
    from .model import coerce_fields
    values = dict(base or {})
    values.update(overrides)
    if args.seed is not None:
        values["seed"] = args.seed
    return ToyDatasetSpec(**coerce_fields(ToyDatasetSpec, values, "<dataset>"))


def _write(out, name, text):
    if out:
        d = Path(out)
        d.mkdir(parents=True, exist_ok=True)
        (d / name).write_text(text)


# ---------------------------------------------------------------- commands

def cmd_summary(args) -> int:
    from .model import summarize
    routed = _split_overrides(_parse_overrides(args.set), ("model",))
    cfg = _model_config(args, routed["model"])
    s = summarize(cfg)
    text = s.to_text()
    print(text)
    _write(args.out, "summary.txt", text + "\n")
    _write(args.out, "summary.json", json.dumps(s.to_dict(), indent=2) + "\n")
    return 0


def cmd_gen_data(args) -> int:
    from .data import write_dataset
    if not args.out:
        raise ConfigurationError("gen-data needs --out DIR")
    routed = _split_overrides(_parse_overrides(args.set), ("data",))
    spec = _data_spec(args, routed["data"])
    root = write_dataset(spec, args.out)
    print(f"wrote dataset to {root} (train {spec.train_samples}, val {spec.val_samples}, "
          f"test {spec.test_samples})")
    return 0


def cmd_train(args) -> int:
    from .data import load_dataset
    from .train import train
    if not args.out:
        raise ConfigurationError("train needs --out DIR")
    routed = _split_overrides(_parse_overrides(args.set), SECTIONS)
    train_cfg = _train_config(args, routed["train"])
    if args.data:
        if routed["data"]:
            raise ConfigurationError("dataset keys cannot be overridden for an on-disk --data "
                                     "directory; regenerate it with gen-data")
        data = Path(args.data)
        spec = load_dataset(data, "train").spec
    else:
        spec = _data_spec(args, routed["data"])
        data = spec
    model_over = dict(routed["model"])
    model_over.setdefault("num_classes", str(spec.num_classes))
    model_over.setdefault("input_height", str(spec.height))
    model_over.setdefault("input_width", str(spec.width))
    if not args.config:
        model_over.setdefault("backbone", "r18")
    cfg = _model_config(args, model_over)

    def progress(rec):
        print(f"epoch {rec['epoch']:4d}  loss {rec['loss']:.4f}  val mIoU {rec['miou']:.4f}  "
              f"lr {rec['lr']:.3g}", flush=True)
    res = train(cfg, data, train_cfg, args.out, progress=None if args.quiet else progress)
    print(f"best val mIoU {res.best_miou:.4f} at epoch {res.best_epoch}; "
          f"checkpoint {res.checkpoint_dir}")
    return 0


def cmd_eval(args) -> int:
    from .train import evaluate_checkpoint
    if not args.checkpoint:
        raise ConfigurationError("eval needs --checkpoint DIR")
    ckpt = Path(args.checkpoint)
    if not (ckpt / "meta.json").exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt} (expected {ckpt / 'meta.json'})")
    m = evaluate_checkpoint(ckpt, args.data, args.split)
    iou = " ".join("-" if np.isnan(v) else f"{v:.4f}" for v in m.iou)
    print(f"split {args.split}: mIoU {m.miou:.4f}  per-class IoU [{iou}]")
    d = m.to_dict()
    d["split"] = args.split
    _write(args.out, f"metrics_{args.split}.json", json.dumps(d, indent=2) + "\n")
    return 0


def _load_any_graph(args):
    from .graph import load_graph
    if args.checkpoint:
        p = Path(args.checkpoint) / "graph"
        if not (p / "graph.txt").exists():
            raise FileNotFoundError(f"checkpoint graph not found: {p / 'graph.txt'}")
        return load_graph(p)
    if args.graph:
        return load_graph(args.graph)
    return None


def cmd_optimize(args) -> int:
    from .graph import count_costs, optimize, save_graph
    from .verify import FOLD_TOL, output_equivalence
    g = _load_any_graph(args)
    if g is None:
        raise ConfigurationError("optimize needs --checkpoint DIR or --graph DIR")
    if not args.out:
        raise ConfigurationError("optimize needs --out DIR")
    opt = optimize(g)
    dev = output_equivalence(g, opt, trials=10, seed=args.seed or 0)
    before, after = count_costs(g).node_count, count_costs(opt).node_count
    report = {"nodes_before": before, "nodes_after": after,
              "node_reduction": (before - after) / before if before else 0.0,
              "max_relative_deviation": dev, "tolerance": FOLD_TOL, "trials": 10,
              "equivalent": dev < FOLD_TOL}
    save_graph(opt, Path(args.out) / "graph")
    _write(args.out, "equivalence.json", json.dumps(report, indent=2) + "\n")
    print(f"nodes {before} -> {after} ({100 * report['node_reduction']:.1f}% fewer); "
          f"max relative deviation {dev:.3e} over 10 random inputs "
          f"({'ok' if report['equivalent'] else 'FAILED'})")
    return 0 if report["equivalent"] else 1


def cmd_bench(args) -> int:
    from .graph import benchmark, optimize, random_inputs
    from .model import build_esanet
    routed = _split_overrides(_parse_overrides(args.set), ("model",))
    g = _load_any_graph(args)
    if g is None:
        g = build_esanet(_model_config(args, routed["model"]))
    inputs = random_inputs(g, 1, seed=args.seed or 0)
    rep = benchmark(g, inputs, reps=args.reps, optimized=optimize(g))
    lines = [rep.to_text()]
    out = {"primary": json.loads(rep.to_json())}
    if args.compare:
        from .model import ESANetConfig
        other = build_esanet(ESANetConfig.load(args.compare))
        rep2 = benchmark(other, random_inputs(other, 1, seed=args.seed or 0), reps=args.reps,
                         optimized=optimize(other))
        lines += [f"compare ({args.compare}):", rep2.to_text()]
        out["compare"] = json.loads(rep2.to_json())
    text = "\n".join(lines)
    print(text)
    _write(args.out, "bench.txt", text + "\n")
    _write(args.out, "bench.json", json.dumps(out, indent=2) + "\n")
    return 0


def cmd_verify(args) -> int:
    from .kernels import bilinear_kernel_3x3
    from .verify import run_verify
    kernel = None
    if args.perturb_upsample:
        kernel = bilinear_kernel_3x3()
        kernel[1, 1] += args.perturb_upsample
    rep = run_verify(instances=args.instances, seed=args.seed or 0, upsample_kernel=kernel)
    text = rep.to_text()
    print(text)
    _write(args.out, "verify.txt", text + "\n")
    _write(args.out, "verify.json", json.dumps(rep.to_dict(), indent=2) + "\n")
    return 0 if rep.passed else 1


COMMANDS = {"summary": cmd_summary, "train": cmd_train, "eval": cmd_eval,
            "optimize": cmd_optimize, "bench": cmd_bench, "gen-data": cmd_gen_data,
            "verify": cmd_verify}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="model config file (key = value lines)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="seed for every random choice")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key; repeatable; prefix with model./train./"
                             "data. to target one section")
    p = argparse.ArgumentParser(prog="esanet", description="RGB-D segmentation toolkit")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("summary", parents=[common], help="stage table and cost report")
    g = sub.add_parser("gen-data", parents=[common], help="write the synthetic dataset")
    t = sub.add_parser("train", parents=[common], help="train on the synthetic dataset")
    t.add_argument("--data", help="dataset directory from gen-data (default: generate)")
    t.add_argument("--train-config", help="training config file (key = value lines)")
    t.add_argument("--quiet", action="store_true", help="no per-epoch output")
    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("--checkpoint", help="checkpoint directory")
    e.add_argument("--split", default="val", choices=("train", "val", "test"))
    e.add_argument("--data", help="dataset directory (default: regenerate from checkpoint)")
    o = sub.add_parser("optimize", parents=[common], help="fold, fuse and prune a graph")
    b = sub.add_parser("bench", parents=[common], help="time a graph before/after optimize")
    for q in (o, b):
        q.add_argument("--checkpoint", help="checkpoint directory")
        q.add_argument("--graph", help="graph directory")
    b.add_argument("--reps", type=int, default=5)
    b.add_argument("--compare", help="second model config to time on the same machine")
    v = sub.add_parser("verify", parents=[common], help="run the property suites")
    v.add_argument("--instances", type=int, default=20, help="instances per gradient suite")
    v.add_argument("--perturb-upsample", type=float, default=0.0,
                   help="add this to the upsample kernel centre (fault injection)")
    del g
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ESANetError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
