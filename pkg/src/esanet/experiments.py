"""Toy-scale comparison runs: RGB-D vs RGB-only and the combined ablation."""
from __future__ import annotations

import json
import statistics
from pathlib import Path

from .data import ToyDatasetSpec
from .model import ESANetConfig
from .train import TrainConfig, train

VARIANTS = {
    "rgbd": {},
    "rgb": {"modality": "rgb"},
    "rgbd_ablated": {"use_context": False, "use_skips": False, "use_se_fusion": False},
}
SEEDS = (0, 1, 2)


def mini_config(seed: int = 0, **overrides) -> ESANetConfig:
    base = dict(backbone="r18", block="nbt1d", modality="rgbd", num_classes=4,
                input_height=64, input_width=64, seed=seed)
    base.update(overrides)
    return ESANetConfig(**base)


def toy_dataset(seed: int = 0) -> ToyDatasetSpec:
    return ToyDatasetSpec(num_classes=4, height=64, width=64, train_samples=256,
                          val_samples=64, depth_only_class=True, seed=seed)


def toy_train_config(seed: int = 0, epochs: int = 300) -> TrainConfig:
    return TrainConfig(epochs=epochs, batch_size=8, max_lr=0.01, seed=seed)


def run_toy_experiment(out_root, variants=tuple(VARIANTS), seeds=SEEDS, epochs: int = 300,
                       data: ToyDatasetSpec | None = None, resume: bool = True,
                       progress=None) -> dict:
    """Train every (variant, seed) pair; returns ``{variant: {seed: best val mIoU}}``.

    A finished run leaves ``result.json`` in its directory; with ``resume``
    such runs are read back instead of retrained.
    """
    root = Path(out_root)
    data = data or toy_dataset()
    results: dict = {}
    for v in variants:
        results[v] = {}
        for s in seeds:
            run_dir = root / f"{v}_seed{s}"
            done = run_dir / "result.json"
            if resume and done.exists():
                rec = json.loads(done.read_text())
            else:
                if run_dir.exists():
                    for f in ("train_log.txt",):
                        (run_dir / f).unlink(missing_ok=True)
                res = train(mini_config(s, **VARIANTS[v]), data, toy_train_config(s, epochs),
                            run_dir)
                rec = {"variant": v, "seed": s, "epochs": epochs, "best_miou": res.best_miou,
                       "best_epoch": res.best_epoch}
                done.write_text(json.dumps(rec, indent=2) + "\n")
            results[v][s] = rec["best_miou"]
            if progress is not None:
                progress(rec)
    (root / "results.json").write_text(json.dumps(
        {"epochs": epochs, "runs": {v: {str(s): m for s, m in r.items()}
                                    for v, r in results.items()},
         "median": {v: median_miou(r) for v, r in results.items()}}, indent=2) + "\n")
    return results


def median_miou(per_seed: dict) -> float:
    return float(statistics.median(per_seed.values()))
