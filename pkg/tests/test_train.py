import math

import numpy as np
import pytest

import oracles as O
from esanet import data as D
from esanet.errors import ConfigurationError, DivergenceError, UsageError
from esanet.graph import execute
from esanet.model import ESANetConfig, build_esanet
from esanet.train import (LR_PRESETS, OneCycleSpec, TrainConfig, evaluate_checkpoint,
                          load_checkpoint, make_inputs, multi_scale_loss, no_decay_names,
                          one_cycle_lr, sgd_momentum_step, train, train_step)

MINI = ESANetConfig(backbone="r18", num_classes=4, input_height=64, input_width=64)
TINY_DATA = D.ToyDatasetSpec(train_samples=8, val_samples=4)


# ---------------------------------------------------------------- schedule

def test_one_cycle_endpoints():
    s = OneCycleSpec(0.01, 1000)
    assert one_cycle_lr(s, 0) == pytest.approx(0.01 / 25, rel=1e-12)
    assert one_cycle_lr(s, s.warmup_steps) == pytest.approx(0.01, rel=1e-12)
    assert one_cycle_lr(s, 999) == pytest.approx(0.01 / 1e4, rel=1e-12)
    with pytest.raises(UsageError):
        one_cycle_lr(s, 1000)
    with pytest.raises(UsageError):
        one_cycle_lr(s, -1)


@pytest.mark.parametrize("total", [3, 4, 10, 9600])
def test_one_cycle_single_peak_and_continuity(total):
    s = OneCycleSpec(0.04, total)
    lrs = np.array([one_cycle_lr(s, i) for i in range(total)])
    assert np.count_nonzero(lrs == lrs.max()) == 1 and lrs.argmax() == s.warmup_steps
    assert (np.diff(lrs[:s.warmup_steps + 1]) > 0).all()
    assert (np.diff(lrs[s.warmup_steps:]) < 0).all()
    if total > 100:
        assert np.abs(np.diff(lrs)).max() < 0.04 * 5 / total


def test_one_cycle_validation():
    with pytest.raises(ConfigurationError):
        OneCycleSpec(0.01, 0)
    short = OneCycleSpec(0.01, 2)
    assert [one_cycle_lr(short, i) for i in range(2)] == [0.01 / 25] * 2
    with pytest.raises(ConfigurationError):
        OneCycleSpec(0.01, 10, warmup_fraction=1.0)
    with pytest.raises(ConfigurationError):
        OneCycleSpec(0.01, 10, start_div=1.0)
    assert 0.01 in LR_PRESETS


# ---------------------------------------------------------------- optimizer

def test_sgd_zero_everything_is_noop():
    p = {"w": np.arange(3.0)}
    new, _ = sgd_momentum_step(p, {"w": np.zeros(3)}, {}, 0.1, 0.9, 0.0)
    assert np.array_equal(new["w"], p["w"])


def test_sgd_plain_step_without_momentum():
    p, g = {"w": np.array([1.0, -2.0])}, {"w": np.array([0.5, 0.25])}
    new, _ = sgd_momentum_step(p, g, {}, 0.1, 0.0, 0.0)
    assert np.allclose(new["w"], p["w"] - 0.1 * g["w"])


def test_sgd_two_step_recursion():
    lr, m, g = 0.1, 0.9, np.array([2.0])
    p, v = {"w": np.array([0.0])}, {}
    for _ in range(2):
        p, v = sgd_momentum_step(p, {"w": g}, v, lr, m, 0.0)
    assert np.allclose(p["w"], -lr * g * (2 + m))


def test_sgd_weight_decay_respects_exclusions():
    p = {"w": np.array([1.0]), "b": np.array([1.0])}
    g = {k: np.zeros(1) for k in p}
    new, _ = sgd_momentum_step(p, g, {}, 1.0, 0.0, 0.5, no_decay={"b"})
    assert new["w"][0] == 0.5 and new["b"][0] == 1.0


def test_sgd_shape_errors():
    with pytest.raises(UsageError):
        sgd_momentum_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, {}, 0.1, 0.9, 0)
    with pytest.raises(UsageError):
        sgd_momentum_step({"w": np.zeros(2)}, {}, {}, 0.1, 0.9, 0)


def test_no_decay_names_cover_biases_and_bn():
    g = build_esanet(MINI)
    nd = no_decay_names(g)
    assert "decoder1.bn.gamma" in nd and "head.conv.bias" in nd
    assert not any(k.endswith(".weight") for k in nd)


# ---------------------------------------------------------------- loss

def _random_outputs(rng, n=2, c=4, h=32, w=32):
    return {"logits": rng.standard_normal((n, c, h, w)) * 2,
            "aux16": rng.standard_normal((n, c, h // 16, w // 16)),
            "aux8": rng.standard_normal((n, c, h // 8, w // 8))}


def test_multi_scale_loss_is_sum_of_oracles():
    rng = np.random.default_rng(0)
    out = _random_outputs(rng)
    lab = rng.integers(0, 4, (2, 1, 32, 32))
    lab[rng.random(lab.shape) < 0.1] = D.VOID
    w = rng.uniform(0.5, 2, 4)
    loss, _ = multi_scale_loss(out, lab, w)
    ref = (O.weighted_ce(out["logits"], lab, w)
           + O.weighted_ce(out["aux16"], D.downscale_labels(lab, 16), w)
           + O.weighted_ce(out["aux8"], D.downscale_labels(lab, 8), w))
    assert loss == pytest.approx(ref, rel=1e-12)


def test_zero_aux_weights_give_single_scale_loss():
    rng = np.random.default_rng(1)
    out = _random_outputs(rng)
    lab = rng.integers(0, 4, (2, 1, 32, 32))
    loss, grads = multi_scale_loss(out, lab, np.ones(4), (1.0, 0.0, 0.0))
    assert loss == pytest.approx(O.weighted_ce(out["logits"], lab, np.ones(4)), rel=1e-12)
    assert set(grads) == {"logits"}


def test_confident_correct_logits_drive_loss_to_zero():
    lab = np.random.default_rng(2).integers(0, 4, (1, 1, 32, 32))
    out = {}
    for name, f in (("logits", 1), ("aux16", 16), ("aux8", 8)):
        l = D.downscale_labels(lab, f)[:, 0]
        out[name] = 50.0 * np.moveaxis(np.eye(4)[l], -1, 1)
    loss, _ = multi_scale_loss(out, lab, np.ones(4))
    assert loss < 1e-15


# ---------------------------------------------------------------- training

def test_train_config_file(tmp_path):
    c = TrainConfig(epochs=3, max_lr=0.02, augment=False)
    (tmp_path / "t.cfg").write_text(c.to_text())
    assert TrainConfig.load(tmp_path / "t.cfg") == c
    with pytest.raises(ConfigurationError, match="unknown"):
        TrainConfig.from_dict({"lr": "0.1"})
    with pytest.raises(ConfigurationError, match="epochs"):
        TrainConfig(epochs=0)


def test_smoke_one_epoch(tmp_path):
    res = train(MINI, TINY_DATA, TrainConfig(epochs=1), tmp_path)
    assert math.isfinite(res.history[0]["loss"]) and 0 <= res.best_miou <= 1
    graph, cfg, meta = load_checkpoint(res.checkpoint_dir)
    assert cfg == MINI and meta["epoch"] == 1
    lines = res.log_path.read_text().splitlines()
    assert lines[0].startswith("# run") and lines[1].startswith("epoch 1 loss ")
    m = evaluate_checkpoint(res.checkpoint_dir, TINY_DATA, "val")
    assert m.miou == pytest.approx(res.best_miou)


def test_train_rejects_mismatched_data(tmp_path):
    with pytest.raises(ConfigurationError, match="num_classes"):
        train(MINI.replace(num_classes=5), TINY_DATA, TrainConfig(epochs=1), tmp_path)
    with pytest.raises(ConfigurationError, match="batch_size"):
        train(MINI, TINY_DATA, TrainConfig(epochs=1, batch_size=9), tmp_path)


def test_divergence_is_reported(tmp_path):
    with pytest.raises(DivergenceError, match="max_lr"):
        train(MINI, TINY_DATA, TrainConfig(epochs=1, batch_size=2, max_lr=1e12), tmp_path)


def test_training_updates_learned_upsample_kernel():
    g = build_esanet(MINI)
    before = g.weights["head.up1.dwconv.weight"].copy()
    samples = [D.generate_toy_rgbd(TINY_DATA, "train", i) for i in range(2)]
    stats = D.compute_stats(samples)
    train_step(g, make_inputs(samples, stats, g.inputs),
               np.concatenate([s.labels for s in samples]), np.ones(4), {}, 0.01,
               TrainConfig())
    assert not np.array_equal(g.weights["head.up1.dwconv.weight"], before)


def test_descent_on_repeated_batch():
    spec = D.ToyDatasetSpec()
    ds = D.ToyDataset(spec, "train")
    stats = D.compute_stats(ds)
    weights = D.median_frequency_weights(ds.labels(), 4)
    samples = [ds[i] for i in range(8, 16)]
    g = build_esanet(MINI)
    inp = make_inputs(samples, stats, g.inputs)
    lab = np.concatenate([s.labels for s in samples])
    cfg = TrainConfig()
    velocity, losses = {}, []
    for _ in range(50):
        loss, velocity = train_step(g, inp, lab, weights, velocity, 1e-3, cfg)
        losses.append(loss)
    assert all(b <= a for a, b in zip(losses, losses[1:])), np.diff(losses).max()
    assert losses[-1] < 0.5 * losses[0]


def test_eval_uses_running_statistics():
    g = build_esanet(MINI)
    samples = [D.generate_toy_rgbd(TINY_DATA, "val", i) for i in range(2)]
    stats = D.compute_stats(samples)
    inp = make_inputs(samples, stats, g.inputs)
    a = execute(g, inp)["logits"]
    b = execute(g, {k: v[:1] for k, v in inp.items()})["logits"]
    assert np.abs(a[:1] - b).max() <= 1e-5 * np.abs(b).max()
