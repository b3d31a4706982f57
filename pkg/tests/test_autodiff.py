import numpy as np
import pytest

import oracles as O
from esanet import tensor_io
from esanet.autodiff import (PRIMITIVES, Tape, backward, grad_check, named_grads,
                             softmax_cross_entropy)
from esanet.errors import ConfigurationError, UsageError
from esanet.verify import GRAD_CASES, grad_suite


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_grad_suite_small(name):
    r = grad_suite(name, instances=4, seed=11)
    assert r.max_error < 1e-6, r.line()


def test_fan_out_gradients_accumulate():
    t = Tape()
    x = t.leaf(np.array([[[[2.0]]]]), name="x")
    y = t.apply("add", [x, x])
    s = t.apply("sum", [t.apply("add", [y, x])])
    g = named_grads(t, backward(t, s))
    assert g["x"].item() == 3.0


def test_backward_needs_scalar_root():
    t = Tape()
    x = t.leaf(np.ones((1, 1, 2, 2)))
    with pytest.raises(UsageError, match="scalar"):
        backward(t, t.apply("relu", [x]))


def test_unknown_primitive():
    with pytest.raises(UsageError):
        Tape().apply("nope", [])


def test_named_grads_zero_fill_untouched_leaves():
    t = Tape()
    a = t.leaf(np.ones((1, 1, 1, 2)), name="a")
    t.leaf(np.ones(3), name="unused")
    g = named_grads(t, backward(t, t.apply("sum", [a])))
    assert np.array_equal(g["unused"], np.zeros(3))


def test_constants_get_no_gradient():
    t = Tape()
    a = t.leaf(np.ones((1, 1, 1, 2)), name="a")
    c = t.leaf(np.ones((1, 1, 1, 2)), name="c", requires_grad=False)
    g = named_grads(t, backward(t, t.apply("sum", [t.apply("add", [a, c])])))
    assert "c" not in g and "a" in g


def test_weighted_ce_matches_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        c = int(rng.integers(2, 5))
        z = rng.standard_normal((2, c, 3, 4)) * 3
        lab = rng.integers(0, c, (2, 1, 3, 4))
        lab[rng.random(lab.shape) < 0.3] = 255
        w = rng.uniform(0.1, 3, c)
        loss, _, _ = softmax_cross_entropy(z, lab, w)
        assert np.isclose(float(loss), O.weighted_ce(z, lab, w), rtol=1e-12)


def test_all_void_loss_is_zero_and_flagged():
    z = np.random.default_rng(0).standard_normal((1, 3, 2, 2))
    loss, grad, flag = softmax_cross_entropy(z, np.full((1, 1, 2, 2), 255), np.ones(3))
    assert float(loss) == 0.0 and flag and not grad.any()


def test_void_pixels_do_not_influence_loss_or_grad():
    rng = np.random.default_rng(1)
    z = rng.standard_normal((1, 3, 4, 4))
    lab = rng.integers(0, 3, (1, 1, 4, 4))
    lab[0, 0, :2] = 255
    l1, g1, _ = softmax_cross_entropy(z, lab, np.ones(3))
    z2 = z.copy()
    z2[:, :, :2] = rng.standard_normal((1, 3, 2, 4)) * 10
    l2, g2, _ = softmax_cross_entropy(z2, lab, np.ones(3))
    assert l1 == l2 and np.array_equal(g1[:, :, 2:], g2[:, :, 2:]) and not g2[:, :, :2].any()


def test_loss_rejects_bad_labels_and_weights():
    z = np.zeros((1, 2, 1, 1))
    with pytest.raises(UsageError):
        softmax_cross_entropy(z, np.full((1, 1, 1, 1), 5), np.ones(2))
    with pytest.raises(UsageError):
        softmax_cross_entropy(z, np.zeros((1, 1, 1, 1), int), np.ones(3))


def test_grad_check_detects_wrong_gradient():
    from esanet.autodiff import Primitive
    PRIMITIVES["_bad"] = Primitive(lambda a, at: (a[0] * 2, {}),
                                   lambda g, a, o, c, at, n: [g * 3])
    try:
        err = grad_check(lambda t, x: t.apply("_bad", [x]), [np.ones((1, 1, 2, 2))])
    finally:
        del PRIMITIVES["_bad"]
    assert err > 0.1


def test_tensor_container_roundtrip(tmp_path):
    for arr in (np.arange(24, dtype=np.float32).reshape(2, 3, 4),
                np.random.default_rng(0).standard_normal((1, 2, 3, 4))):
        tensor_io.save(tmp_path / "t.estn", arr)
        back = tensor_io.load(tmp_path / "t.estn")
        assert back.dtype == arr.dtype and np.array_equal(back, arr)


def test_tensor_container_rejects_garbage():
    with pytest.raises(ConfigurationError, match="magic"):
        tensor_io.from_bytes(b"NOPE0000")
    good = tensor_io.to_bytes(np.zeros(3, np.float32))
    with pytest.raises(ConfigurationError):
        tensor_io.from_bytes(good[:4] + bytes([9]) + good[5:])
    with pytest.raises(ConfigurationError):
        tensor_io.from_bytes(good[:-2])
