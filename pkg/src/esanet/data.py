"""Synthetic RGB-D segmentation data, augmentation and label utilities.

Scenes are a floor/wall background with a few flat objects placed at
different depths.  With ``depth_only_class`` set, the two object classes are
drawn from one color palette and can only be told apart by their depth.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

from . import kernels as K
from . import tensor_io
from .errors import ConfigurationError, UsageError

VOID = 255
SPLITS = {"train": 0, "val": 1, "test": 2}
FLOOR, WALL = 0, 1

# hue centers per class; object classes beyond the table reuse it cyclically
_HUES = (0.08, 0.58, 0.33, 0.92, 0.75, 0.16)
_OBJECT_DEPTH_PLANES = ((1.0, 2.2), (3.4, 4.6), (5.0, 5.8), (2.6, 3.0))


@dataclass(frozen=True)
class ToyDatasetSpec:
    num_classes: int = 4
    height: int = 64
    width: int = 64
    train_samples: int = 256
    val_samples: int = 64
    test_samples: int = 0
    depth_only_class: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigurationError("dataset key 'num_classes' must be >= 2")
        for key in ("height", "width"):
            v = getattr(self, key)
            if v < 32 or v % 32:
                raise ConfigurationError(f"dataset key {key!r} must be a multiple of 32, got {v}")
        for key in ("train_samples", "val_samples", "test_samples"):
            if getattr(self, key) < 0:
                raise ConfigurationError(f"dataset key {key!r} must be >= 0")

    def split_size(self, split: str) -> int:
        if split not in SPLITS:
            raise UsageError(f"unknown split {split!r}; expected one of {sorted(SPLITS)}")
        return getattr(self, f"{split}_samples")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class ToySample:
    rgb: np.ndarray     # (1, 3, H, W) float32 in [0, 1]
    depth: np.ndarray   # (1, 1, H, W) float32 meters, 0 = invalid
    labels: np.ndarray  # (1, 1, H, W) uint8, VOID = 255

    def copy(self) -> "ToySample":
        return ToySample(self.rgb.copy(), self.depth.copy(), self.labels.copy())


# ---------------------------------------------------------------- generation

def _palette_color(rng, cls):
    h = (_HUES[cls % len(_HUES)] + rng.uniform(-0.04, 0.04)) % 1.0
    return hsv_to_rgb([h, rng.uniform(0.45, 0.85), rng.uniform(0.45, 0.9)])


def _shape_mask(rng, h, w):
    sh, sw = rng.integers(h // 8, h // 3 + 1), rng.integers(w // 8, w // 3 + 1)
    cy, cx = rng.integers(0, h), rng.integers(0, w)
    yy, xx = np.mgrid[0:h, 0:w]
    if rng.random() < 0.5:
        return (np.abs(yy - cy) <= sh / 2) & (np.abs(xx - cx) <= sw / 2)
    return ((yy - cy) / (sh / 2)) ** 2 + ((xx - cx) / (sw / 2)) ** 2 <= 1.0


def generate_toy_rgbd(spec: ToyDatasetSpec, split: str, index: int) -> ToySample:
    """Deterministic sample ``index`` of ``split``."""
    spec.split_size(split)
    rng = np.random.default_rng([spec.seed, SPLITS[split], index])
    h, w = spec.height, spec.width
    rows = np.arange(h, dtype=np.float64)[:, None] * np.ones((1, w))

    horizon = rng.integers(int(0.3 * h), int(0.7 * h) + 1)
    wall_depth = rng.uniform(6.5, 9.5)
    labels = np.where(rows < horizon, WALL, FLOOR).astype(np.uint8)
    floor_t = np.clip((rows - horizon) / max(h - horizon, 1), 0.0, 1.0)
    depth = np.where(rows < horizon, wall_depth, wall_depth - (wall_depth - 0.8) * floor_t)
    rgb = np.empty((h, w, 3))
    rgb[rows[:, 0] < horizon] = _palette_color(rng, WALL)
    rgb[rows[:, 0] >= horizon] = _palette_color(rng, FLOOR)

    object_classes = list(range(2, spec.num_classes))
    if object_classes:
        objs = []
        for _ in range(rng.integers(2, 6)):
            cls = int(rng.choice(object_classes))
            lo, hi = _OBJECT_DEPTH_PLANES[(cls - 2) % len(_OBJECT_DEPTH_PLANES)]
            # with the depth-only flag every object class shares class 2's palette
            palette = 2 if spec.depth_only_class else cls
            objs.append((rng.uniform(lo, hi), cls, palette, _shape_mask(rng, h, w)))
        for d, cls, palette, mask in sorted(objs, key=lambda o: -o[0]):
            labels[mask] = cls
            depth[mask] = d
            rgb[mask] = _palette_color(rng, palette)

    rgb = np.clip(rgb + rng.normal(0.0, 0.04, rgb.shape), 0.0, 1.0)
    depth = np.clip(depth + rng.normal(0.0, 0.02, depth.shape), 0.5, 10.0)
    depth[rng.random((h, w)) < 0.02] = 0.0

    # void band along class boundaries, like unlabeled object outlines
    edge = np.zeros((h, w), dtype=bool)
    edge[1:] |= labels[1:] != labels[:-1]
    edge[:, 1:] |= labels[:, 1:] != labels[:, :-1]
    labels[edge & (rng.random((h, w)) < 0.5)] = VOID

    return ToySample(rgb.transpose(2, 0, 1)[None].astype(np.float32),
                     depth[None, None].astype(np.float32), labels[None, None])


# ---------------------------------------------------------------- augmentation

@dataclass(frozen=True)
class AugmentParams:
    scale: float = 1.0
    crop_y: int = 0
    crop_x: int = 0
    flip: bool = False
    hue: float = 0.0
    saturation: float = 0.0
    value: float = 0.0


def draw_augment_params(rng, height, width) -> AugmentParams:
    s = rng.uniform(1.0, 1.4)
    sh, sw = int(round(height * s)), int(round(width * s))
    return AugmentParams(s, int(rng.integers(0, sh - height + 1)),
                         int(rng.integers(0, sw - width + 1)), bool(rng.random() < 0.5),
                         rng.uniform(-10 / 360, 10 / 360), rng.uniform(-0.1, 0.1),
                         rng.uniform(-0.1, 0.1))


def _nearest_index(n_in, n_out):
    return np.minimum(((np.arange(n_out) + 0.5) * n_in / n_out).astype(np.int64), n_in - 1)


def apply_augment(sample: ToySample, p: AugmentParams) -> ToySample:
    _, _, h, w = sample.rgb.shape
    rgb, depth, labels = sample.rgb, sample.depth, sample.labels
    if p.scale != 1.0:
        sh, sw = int(round(h * p.scale)), int(round(w * p.scale))
        rgb = K.bilinear_resize(rgb, sh, sw)
        # interpolate only over valid depth so invalid pixels do not bleed in
        valid = (depth > 0).astype(np.float32)
        num = K.bilinear_resize(depth * valid, sh, sw)
        den = K.bilinear_resize(valid, sh, sw)
        depth = np.where(den > 0.5, num / np.maximum(den, 1e-12), 0.0) / p.scale
        labels = labels[:, :, _nearest_index(h, sh)][:, :, :, _nearest_index(w, sw)]
    ys, xs = slice(p.crop_y, p.crop_y + h), slice(p.crop_x, p.crop_x + w)
    rgb, depth, labels = rgb[:, :, ys, xs], depth[:, :, ys, xs], labels[:, :, ys, xs]
    if rgb.shape[2:] != (h, w):
        raise UsageError(f"crop offset ({p.crop_y}, {p.crop_x}) leaves the scaled image")
    if p.flip:
        rgb, depth, labels = rgb[..., ::-1], depth[..., ::-1], labels[..., ::-1]
    if p.hue or p.saturation or p.value:
        hsv = rgb_to_hsv(np.clip(rgb[0].transpose(1, 2, 0), 0.0, 1.0))
        hsv[..., 0] = (hsv[..., 0] + p.hue) % 1.0
        hsv[..., 1] = np.clip(hsv[..., 1] * (1 + p.saturation), 0.0, 1.0)
        hsv[..., 2] = np.clip(hsv[..., 2] * (1 + p.value), 0.0, 1.0)
        rgb = hsv_to_rgb(hsv).transpose(2, 0, 1)[None]
    return ToySample(np.ascontiguousarray(rgb, dtype=np.float32),
                     np.ascontiguousarray(depth, dtype=np.float32),
                     np.ascontiguousarray(labels))


def augment(sample: ToySample, rng) -> ToySample:
    """Random scale, crop, horizontal flip and HSV jitter (color only)."""
    _, _, h, w = sample.rgb.shape
    return apply_augment(sample, draw_augment_params(rng, h, w))


# ---------------------------------------------------------------- labels

def class_frequencies(label_maps, num_classes: int) -> np.ndarray:
    """Per-class pixel count over the pixel count of images containing the class."""
    counts = np.zeros(num_classes, dtype=np.float64)
    totals = np.zeros(num_classes, dtype=np.float64)
    for lab in label_maps:
        lab = np.asarray(lab).ravel()
        lab = lab[lab != VOID]
        if lab.size and lab.max() >= num_classes:
            raise UsageError(f"label {int(lab.max())} outside [0, {num_classes})")
        c = np.bincount(lab.astype(np.int64), minlength=num_classes)
        counts += c
        totals[c > 0] += lab.size
    absent = np.flatnonzero(counts == 0)
    if absent.size:
        raise UsageError(f"classes never appear in the dataset: {absent.tolist()}")
    return counts / totals


def weights_from_frequencies(freq) -> np.ndarray:
    freq = np.asarray(freq, dtype=np.float64)
    return np.median(freq) / freq


def median_frequency_weights(label_maps, num_classes: int) -> np.ndarray:
    """Class weights ``median(freq) / freq_c`` (void excluded)."""
    return weights_from_frequencies(class_frequencies(label_maps, num_classes))


def downscale_labels(labels: np.ndarray, factor: int) -> np.ndarray:
    """Nearest subsampling: keep pixel ``(f//2 + f*i, f//2 + f*j)`` of each cell."""
    labels = np.asarray(labels)
    h, w = labels.shape[-2:]
    if factor < 1 or h % factor or w % factor:
        raise UsageError(f"label map {h}x{w} is not divisible by factor {factor}")
    o = factor // 2
    return np.ascontiguousarray(labels[..., o::factor, o::factor])


# ---------------------------------------------------------------- normalization

@dataclass(frozen=True)
class InputStats:
    rgb_mean: tuple
    rgb_std: tuple
    depth_mean: float
    depth_std: float

    def to_dict(self) -> dict:
        return {"rgb_mean": list(self.rgb_mean), "rgb_std": list(self.rgb_std),
                "depth_mean": self.depth_mean, "depth_std": self.depth_std}

    @classmethod
    def from_dict(cls, d) -> "InputStats":
        return cls(tuple(d["rgb_mean"]), tuple(d["rgb_std"]), float(d["depth_mean"]),
                   float(d["depth_std"]))


def compute_stats(samples) -> InputStats:
    rgb_sum = np.zeros(3)
    rgb_sq = np.zeros(3)
    n_rgb = 0
    d_sum = d_sq = 0.0
    n_d = 0
    for s in samples:
        x = s.rgb[0].reshape(3, -1).astype(np.float64)
        rgb_sum += x.sum(1)
        rgb_sq += (x * x).sum(1)
        n_rgb += x.shape[1]
        d = s.depth.ravel().astype(np.float64)
        d = d[d > 0]
        d_sum += d.sum()
        d_sq += (d * d).sum()
        n_d += d.size
    if n_rgb == 0 or n_d < 2:
        raise UsageError("cannot compute input statistics from an empty dataset")
    rm = rgb_sum / n_rgb
    rs = np.sqrt(np.maximum(rgb_sq / n_rgb - rm * rm, 1e-12))
    dm = d_sum / n_d
    ds = float(np.sqrt(max(d_sq / n_d - dm * dm, 1e-12)))
    return InputStats(tuple(map(float, rm)), tuple(map(float, rs)), float(dm), ds)


def normalize_depth(depth, stats: InputStats) -> np.ndarray:
    """Z-score valid depth; invalid (zero) pixels map to 0."""
    depth = np.asarray(depth, dtype=np.float32)
    z = (depth - np.float32(stats.depth_mean)) / np.float32(stats.depth_std)
    return np.where(depth > 0, z, np.float32(0)).astype(np.float32)


def normalize_rgb(rgb, stats: InputStats) -> np.ndarray:
    m = np.asarray(stats.rgb_mean, dtype=np.float32).reshape(1, 3, 1, 1)
    s = np.asarray(stats.rgb_std, dtype=np.float32).reshape(1, 3, 1, 1)
    return ((np.asarray(rgb, dtype=np.float32) - m) / s).astype(np.float32)


# ---------------------------------------------------------------- datasets

class ToyDataset:
    """A split of the synthetic dataset, generated lazily or read from disk."""

    def __init__(self, spec: ToyDatasetSpec, split: str, root: Path | None = None):
        self.spec = spec
        self.split = split
        self.root = root
        self._n = spec.split_size(split)
        self._cache: dict[int, ToySample] = {}

    def __len__(self):
        return self._n

    def __getitem__(self, i: int) -> ToySample:
        if not 0 <= i < self._n:
            raise IndexError(i)
        if i not in self._cache:
            if self.root is None:
                self._cache[i] = generate_toy_rgbd(self.spec, self.split, i)
            else:
                d = self.root / self.split
                self._cache[i] = ToySample(
                    tensor_io.load(d / f"{i:05d}_rgb.estn").astype(np.float32),
                    tensor_io.load(d / f"{i:05d}_depth.estn").astype(np.float32),
                    tensor_io.load(d / f"{i:05d}_labels.estn").astype(np.uint8))
        return self._cache[i]

    def __iter__(self):
        return (self[i] for i in range(self._n))

    def labels(self):
        return (s.labels for s in self)


MANIFEST = "manifest.json"


def write_dataset(spec: ToyDatasetSpec, root) -> Path:
    root = Path(root)
    counts = {}
    for split in SPLITS:
        n = spec.split_size(split)
        counts[split] = n
        if not n:
            continue
        d = root / split
        d.mkdir(parents=True, exist_ok=True)
        for i in range(n):
            s = generate_toy_rgbd(spec, split, i)
            tensor_io.save(d / f"{i:05d}_rgb.estn", s.rgb)
            tensor_io.save(d / f"{i:05d}_depth.estn", s.depth)
            tensor_io.save(d / f"{i:05d}_labels.estn", s.labels.astype(np.float32))
    (root / MANIFEST).write_text(json.dumps({"format": "esanet-toy-rgbd 1", "counts": counts,
                                             "spec": spec.to_dict()}, indent=2, sort_keys=True))
    return root


def load_dataset(root, split: str) -> ToyDataset:
    root = Path(root)
    manifest = root / MANIFEST
    if not manifest.exists():
        raise FileNotFoundError(f"dataset manifest not found: {manifest}")
    meta = json.loads(manifest.read_text())
    spec = ToyDatasetSpec(**meta["spec"])
    return ToyDataset(spec, split, root)
