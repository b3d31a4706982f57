"""Training loop, optimizer, learning-rate schedule, loss and evaluation."""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as D
from .autodiff import Tape, backward, named_grads, softmax_cross_entropy
from .errors import ConfigurationError, DivergenceError, UsageError
from .graph import execute, load_graph, save_graph, trace
from .graph.ir import Graph
from .kernels import bilinear_resize
from .metrics import ConfusionMatrix, SegmentationMetrics, argmax_classes, segmentation_metrics
from .model import ESANetConfig, build_esanet, coerce_fields, parse_kv

LR_PRESETS = (0.00125, 0.0025, 0.005, 0.01, 0.02, 0.04)
AUX_FACTORS = {"aux16": 16, "aux8": 8}


# ---------------------------------------------------------------- schedule

@dataclass(frozen=True)
class OneCycleSpec:
    max_lr: float
    total_steps: int
    warmup_fraction: float = 0.3
    start_div: float = 25.0
    final_div: float = 1e4

    def __post_init__(self):
        if not self.max_lr > 0:
            raise ConfigurationError("max_lr must be positive")
        if self.total_steps < 1:
            raise ConfigurationError("one-cycle schedule needs at least 1 step")
        if not 0 < self.warmup_fraction < 1:
            raise ConfigurationError("warmup_fraction must lie in (0, 1)")
        if not (self.start_div > 1 and self.final_div > 1):
            raise ConfigurationError("start_div and final_div must be > 1")

    @property
    def degenerate(self) -> bool:
        # too short for a rise and a fall: hold the starting rate
        return self.total_steps < 3

    @property
    def warmup_steps(self) -> int:
        """Index of the step that reaches ``max_lr``."""
        if self.degenerate:
            return 0
        w = int(round(self.warmup_fraction * (self.total_steps - 1)))
        return min(max(1, w), self.total_steps - 2)


def one_cycle_lr(spec: OneCycleSpec, step: int) -> float:
    if not 0 <= step < spec.total_steps:
        raise UsageError(f"step {step} outside [0, {spec.total_steps})")
    w, top = spec.warmup_steps, spec.max_lr
    start, end = top / spec.start_div, top / spec.final_div
    if spec.degenerate:
        return start
    if step <= w:
        return start + (top - start) * step / w
    t = (step - w) / (spec.total_steps - 1 - w)
    return end + (top - end) * 0.5 * (1.0 + math.cos(math.pi * t))


# ---------------------------------------------------------------- optimizer

def sgd_momentum_step(params: dict, grads: dict, velocity: dict, lr: float, momentum: float,
                      weight_decay: float, no_decay=frozenset()):
    """Heavy-ball SGD; returns ``(new_params, new_velocity)``.

    ``v = momentum * v + grad + wd * p`` and ``p = p - lr * v``.  Names in
    ``no_decay`` skip the weight-decay term.
    """
    new_p, new_v = {}, {}
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            raise UsageError(f"missing gradient for parameter {k!r}")
        if np.shape(g) != np.shape(p):
            raise UsageError(f"gradient shape {np.shape(g)} does not match parameter "
                             f"{k!r} of shape {np.shape(p)}")
        v = velocity.get(k)
        if v is None:
            v = np.zeros_like(p)
        elif np.shape(v) != np.shape(p):
            raise UsageError(f"velocity shape mismatch for {k!r}")
        d = g if (weight_decay == 0 or k in no_decay) else g + weight_decay * p
        v = momentum * v + d
        new_v[k] = v.astype(p.dtype, copy=False)
        new_p[k] = (p - lr * v).astype(p.dtype, copy=False)
    return new_p, new_v


def no_decay_names(graph: Graph) -> set[str]:
    """Biases and batch-norm affine parameters."""
    out = set()
    for n in graph.nodes:
        if n.op == "conv2d" and n.attrs.get("bias"):
            out.add(n.attrs["bias"])
        elif n.op == "batchnorm":
            out.update((n.attrs["gamma"], n.attrs["beta"]))
    return out


# ---------------------------------------------------------------- loss

def _scale_terms(outputs, labels, scale_weights):
    lab = np.asarray(labels)
    terms = [("logits", lab, scale_weights[0])]
    for (name, f), k in zip(AUX_FACTORS.items(), scale_weights[1:]):
        if name in outputs:
            terms.append((name, D.downscale_labels(lab, f), k))
    return [t for t in terms if t[2] != 0]


def multi_scale_loss(outputs: dict, labels, class_weights, scale_weights=(1.0, 1.0, 1.0)):
    """Weighted cross entropy at full, 1/16 and 1/8 resolution.

    Returns ``(loss, grads)`` with ``grads`` keyed like ``outputs``.
    """
    total, grads = 0.0, {}
    for name, lab, k in _scale_terms(outputs, labels, scale_weights):
        loss, g, _ = softmax_cross_entropy(outputs[name], lab, class_weights)
        total += k * float(loss)
        grads[name] = k * g
    return total, grads


def multi_scale_loss_on_tape(tape: Tape, outputs: dict, labels, class_weights,
                             scale_weights=(1.0, 1.0, 1.0)) -> int:
    ids, ks = [], []
    for name, lab, k in _scale_terms(outputs, labels, scale_weights):
        ids.append(tape.apply("softmax_cross_entropy", [outputs[name]], labels=lab,
                              class_weights=class_weights))
        ks.append(k)
    if not ids:
        raise ConfigurationError("all loss scale weights are zero")
    return tape.apply("linear_combination", ids, coefficients=tuple(ks))


# ---------------------------------------------------------------- config

@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 8
    max_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    warmup_fraction: float = 0.3
    start_div: float = 25.0
    final_div: float = 1e4
    main_weight: float = 1.0
    aux16_weight: float = 1.0
    aux8_weight: float = 1.0
    augment: bool = True
    eval_batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError("train key 'epochs' must be >= 1")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigurationError("train key 'batch_size' must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError("train key 'momentum' must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigurationError("train key 'weight_decay' must be >= 0")

    @property
    def scale_weights(self):
        return (self.main_weight, self.aux16_weight, self.aux8_weight)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {str(getattr(self, f.name)).lower() if isinstance(getattr(self, f.name), bool) else getattr(self, f.name)}\n"
                       for f in dataclasses.fields(self))

    @classmethod
    def from_dict(cls, values, source="<train config>") -> "TrainConfig":
        return cls(**coerce_fields(cls, values, source))

    @classmethod
    def load(cls, path) -> "TrainConfig":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"train config file not found: {path}")
        return cls.from_dict(parse_kv(path.read_text(), str(path)), str(path))


# ---------------------------------------------------------------- batching

def make_inputs(samples, stats: D.InputStats, input_names) -> dict:
    out = {}
    if "rgb" in input_names:
        out["rgb"] = D.normalize_rgb(np.concatenate([s.rgb for s in samples]), stats)
    if "depth" in input_names:
        out["depth"] = D.normalize_depth(np.concatenate([s.depth for s in samples]), stats)
    return out


def evaluate(graph: Graph, dataset, stats: D.InputStats, batch_size: int = 8,
             num_classes: int | None = None) -> SegmentationMetrics:
    """Confusion matrix, per-class IoU and mIoU of ``graph`` on ``dataset``."""
    c = graph.node_map()[graph.outputs["logits"]].shape[1]
    expected = num_classes if num_classes is not None else dataset.spec.num_classes
    if c != expected:
        raise ConfigurationError(f"graph predicts {c} classes, dataset has {expected}")
    cm = ConfusionMatrix(c)
    for start in range(0, len(dataset), batch_size):
        samples = [dataset[i] for i in range(start, min(start + batch_size, len(dataset)))]
        logits = execute(graph, make_inputs(samples, stats, graph.inputs), ["logits"])["logits"]
        labels = np.concatenate([s.labels for s in samples])
        if logits.shape[2:] != labels.shape[2:]:
            logits = bilinear_resize(logits, *labels.shape[2:])
        cm.update(argmax_classes(logits), labels[:, 0])
    return segmentation_metrics(cm)


# ---------------------------------------------------------------- training

LOG_NAME = "train_log.txt"
CHECKPOINT = "checkpoint"


@dataclass
class TrainResult:
    best_miou: float
    best_epoch: int
    out_dir: Path
    history: list = field(default_factory=list)

    @property
    def log_path(self) -> Path:
        return self.out_dir / LOG_NAME

    @property
    def checkpoint_dir(self) -> Path:
        return self.out_dir / CHECKPOINT


def _resolve_data(data):
    if isinstance(data, D.ToyDatasetSpec):
        return D.ToyDataset(data, "train"), D.ToyDataset(data, "val")
    root = Path(data)
    return D.load_dataset(root, "train"), D.load_dataset(root, "val")


def _fmt(x: float) -> str:
    return repr(float(x))


def save_checkpoint(directory, graph: Graph, model_cfg: ESANetConfig, train_cfg: TrainConfig,
                    meta: dict) -> Path:
    d = Path(directory)
    save_graph(graph, d / "graph")
    model_cfg.save(d / "model.cfg")
    (d / "train.cfg").write_text(train_cfg.to_text())
    (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return d


def load_checkpoint(directory):
    """Return ``(graph, model_config, meta)`` from a checkpoint directory."""
    d = Path(directory)
    if not (d / "meta.json").exists():
        raise FileNotFoundError(f"checkpoint not found (no meta.json): {d}")
    graph = load_graph(d / "graph")
    return graph, ESANetConfig.load(d / "model.cfg"), json.loads((d / "meta.json").read_text())


def train_step(graph: Graph, inputs: dict, labels, class_weights, velocity: dict, lr: float,
               train_cfg: TrainConfig, trainable=None, no_decay=None):
    """One SGD step in place on ``graph.weights``; returns ``(loss, velocity)``.

    The loss is the value before the update.  Batch-norm running statistics
    are refreshed from the same forward pass.
    """
    trainable = graph.trainable_names() if trainable is None else trainable
    no_decay = no_decay_names(graph) if no_decay is None else no_decay
    tape = Tape()
    outs, running = trace(graph, tape, inputs, training=True)
    loss_id = multi_scale_loss_on_tape(tape, outs, labels, class_weights, train_cfg.scale_weights)
    loss = float(tape.value(loss_id))
    if not math.isfinite(loss):
        raise DivergenceError(f"non-finite loss {loss}")
    grads = named_grads(tape, backward(tape, loss_id))
    params = {k: graph.weights[k] for k in trainable}
    new_p, velocity = sgd_momentum_step(params, grads, velocity, lr, train_cfg.momentum,
                                        train_cfg.weight_decay, no_decay)
    graph.weights.update(new_p)
    graph.weights.update(running)
    return loss, velocity


def train(model_cfg: ESANetConfig, data, train_cfg: TrainConfig, out_dir,
          progress=None) -> TrainResult:
    """Train on the toy data and keep the best-mIoU checkpoint.

    ``data`` is a :class:`ToyDatasetSpec` (generated on the fly) or a dataset
    directory written by :func:`esanet.data.write_dataset`.
    """
    train_ds, val_ds = _resolve_data(data)
    spec = train_ds.spec
    if model_cfg.num_classes != spec.num_classes:
        raise ConfigurationError(f"config key 'num_classes': model has {model_cfg.num_classes}, "
                                 f"dataset has {spec.num_classes}")
    if (model_cfg.input_height, model_cfg.input_width) != (spec.height, spec.width):
        raise ConfigurationError("config keys 'input_height'/'input_width' do not match the "
                                 f"dataset size {spec.height}x{spec.width}")
    steps_per_epoch = len(train_ds) // train_cfg.batch_size
    if steps_per_epoch == 0:
        raise ConfigurationError(f"train key 'batch_size' {train_cfg.batch_size} exceeds the "
                                 f"{len(train_ds)} training samples")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    stats = D.compute_stats(train_ds)
    class_weights = D.median_frequency_weights(train_ds.labels(), spec.num_classes)
    graph = build_esanet(model_cfg)
    trainable = graph.trainable_names()
    no_decay = no_decay_names(graph)
    schedule = OneCycleSpec(train_cfg.max_lr, train_cfg.epochs * steps_per_epoch,
                            train_cfg.warmup_fraction, train_cfg.start_div, train_cfg.final_div)
    velocity: dict = {}
    result = TrainResult(-math.inf, 0, out)
    log_path = out / LOG_NAME
    with log_path.open("a") as f:
        f.write(f"# run backbone={model_cfg.backbone} block={model_cfg.block_kind} "
                f"modality={model_cfg.modality} seed={train_cfg.seed} model_seed={model_cfg.seed}\n")

    step = 0
    for epoch in range(1, train_cfg.epochs + 1):
        order = np.random.default_rng([train_cfg.seed, epoch]).permutation(len(train_ds))
        losses = []
        for b in range(steps_per_epoch):
            idx = order[b * train_cfg.batch_size:(b + 1) * train_cfg.batch_size]
            samples = [train_ds[int(i)] for i in idx]
            if train_cfg.augment:
                samples = [D.augment(s, np.random.default_rng([train_cfg.seed, epoch, int(i)]))
                           for s, i in zip(samples, idx)]
            inputs = make_inputs(samples, stats, graph.inputs)
            labels = np.concatenate([s.labels for s in samples])

            lr = one_cycle_lr(schedule, step)
            try:
                loss, velocity = train_step(graph, inputs, labels, class_weights, velocity, lr,
                                            train_cfg, trainable, no_decay)
            except DivergenceError as e:
                raise DivergenceError(f"{e} at epoch {epoch}, step {step} (lr {lr:.3g}); "
                                      "lower train key 'max_lr'") from None
            losses.append(loss)
            step += 1

        metrics = evaluate(graph, val_ds, stats, train_cfg.eval_batch_size)
        mean_loss = float(np.mean(losses))
        record = {"epoch": epoch, "loss": mean_loss, "miou": metrics.miou, "lr": lr}
        result.history.append(record)
        with log_path.open("a") as f:
            f.write(f"epoch {epoch} loss {_fmt(mean_loss)} miou {_fmt(metrics.miou)} "
                    f"lr {_fmt(lr)}\n")
        score = metrics.miou if math.isfinite(metrics.miou) else -math.inf
        if score > result.best_miou:
            result.best_miou, result.best_epoch = score, epoch
            meta = {"epoch": epoch, "miou": metrics.miou, "iou": metrics.to_dict()["iou"],
                    "stats": stats.to_dict(), "class_weights": class_weights.tolist(),
                    "dataset": spec.to_dict()}
            save_checkpoint(out / CHECKPOINT, graph, model_cfg, train_cfg, meta)
        if progress is not None:
            progress(record)
    return result


def evaluate_checkpoint(checkpoint, data, split: str = "val", batch_size: int = 8):
    graph, cfg, meta = load_checkpoint(checkpoint)
    if isinstance(data, D.ToyDatasetSpec):
        ds = D.ToyDataset(data, split)
    elif data is None:
        ds = D.ToyDataset(D.ToyDatasetSpec(**meta["dataset"]), split)
    else:
        ds = D.load_dataset(data, split)
    return evaluate(graph, ds, D.InputStats.from_dict(meta["stats"]), batch_size)
