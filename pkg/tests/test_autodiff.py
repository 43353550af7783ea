import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from meflab import autodiff as ad
from meflab import models
from meflab.errors import NonFiniteError, ShapeError

from conftest import random_model


def test_zero_weights_give_uniform_loss():
    spec = models.make_spec("mlp", num_classes=4)
    model = models.build(spec, 0)
    model = model.with_params({k: np.zeros_like(v) for k, v in model.params.items()})
    x = np.random.default_rng(0).uniform(size=(5, 1, 16, 16))
    loss, _ = ad.forward_loss(model, x, np.array([0, 1, 2, 3, 0]))
    np.testing.assert_allclose(loss, math.log(4), rtol=1e-6)


def test_identity_linear_model_hand_computed():
    spec = models.make_spec("mlp", input_shape=(2,), num_classes=2, hidden=())
    model = models.Model(spec, {"0.dense.w": np.eye(2), "0.dense.b": np.zeros(2)})
    loss, _ = ad.forward_loss(model, np.array([[1.0, 0.0]]), np.array([0]))
    assert loss[0] == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)
    assert loss[0] == pytest.approx(0.3133, abs=1e-4)


def test_duplicate_samples_have_identical_losses():
    model = random_model("cnn-a", 1)
    x = np.random.default_rng(1).uniform(size=(1, 1, 16, 16))
    loss, _ = ad.forward_loss(model, np.concatenate([x, x]), np.array([2, 2]))
    assert loss[0] == loss[1]


def test_shape_mismatch_names_layer():
    spec = models.make_spec("mlp", input_shape=(4,), num_classes=2, hidden=(3,))
    model = models.build(spec, 0)
    bad = dict(model.params)
    tape = ad.Tape()
    x = tape.leaf(np.zeros((1, 5)))
    with pytest.raises(ShapeError, match="0.dense"):
        ad.matmul(x, tape.leaf(bad["0.dense.w"]), "0.dense")
    with pytest.raises(ShapeError):
        ad.forward_loss(model, np.zeros((1, 5)), np.array([0]))


def test_non_finite_input_rejected():
    model = random_model("mlp", 0)
    x = np.full((1, 1, 16, 16), np.nan)
    with pytest.raises(NonFiniteError):
        ad.forward_loss(model, x, np.array([0]))


def test_constant_output_model_has_zero_input_gradient():
    model = random_model("mlp", 0)
    model = model.with_params({k: np.zeros_like(v) for k, v in model.params.items()})
    g = ad.grad_input(model, np.random.default_rng(0).uniform(size=(3, 1, 16, 16)), np.array([0, 1, 2]))
    assert not g.any()


def test_square_via_shared_matmul():
    tape = ad.Tape()
    x = tape.leaf(np.array([[3.0]]))
    out = ad.matmul(x, x)
    (g,) = tape.gradients(out, [x])
    assert out.value[0, 0] == 9.0
    assert g[0, 0] == 6.0


def test_tape_is_topologically_ordered():
    model = random_model("cnn-a", 0)
    _, tape = ad.forward_loss(model, np.zeros((2, 1, 16, 16)), np.array([0, 1]))
    for rec in tape.records:
        assert all(i < rec.output for i in rec.inputs)
    ops = {r.op for r in tape.records}
    assert {"conv2d", "maxpool2", "relu", "bias_add", "flatten", "matmul", "softmax_cross_entropy"} <= ops


def _piecewise_fd_error(model, x, y, h, samples, rng):
    """Central-difference check restricted to coordinates whose +-h probes
    stay on the same linear piece as x (no ReLU sign flip, no pool switch)."""
    _, tape = ad.forward_loss(model, x, y)
    base = ad.activation_pattern(tape)
    _, g = ad.loss_and_grad_input(model, x, y)
    worst, used = 0.0, 0
    for i in rng.permutation(x.size):
        e = np.zeros(x.size)
        e[i] = h
        e = e.reshape(x.shape)
        lp, tp = ad.forward_loss(model, x + e, y)
        lm, tm = ad.forward_loss(model, x - e, y)
        if ad.activation_pattern(tp) != base or ad.activation_pattern(tm) != base:
            continue
        num = (lp.sum() - lm.sum()) / (2 * h)
        a = g.ravel()[i]
        worst = max(worst, abs(a - num) / max(abs(a), 1e-8))
        used += 1
        if used == samples:
            break
    assert used == samples
    return worst


@settings(max_examples=6, deadline=None)
@given(arch=st.sampled_from(["mlp", "cnn-a", "cnn-b"]), seed=st.integers(0, 2**16))
def test_input_gradient_matches_finite_differences(arch, seed):
    model = random_model(arch, seed)
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(2, 1, 16, 16))
    y = rng.integers(0, 4, size=2)
    assert _piecewise_fd_error(model, x, y, 1e-3, 32, rng) < 1e-4


def test_mlp_gradient_plain_finite_differences():
    model = random_model("mlp", 7)
    rng = np.random.default_rng(11)
    x = rng.uniform(size=(2, 1, 16, 16))
    y = np.array([1, 3])

    def f(xx):
        loss, g = ad.loss_and_grad_input(model, xx, y)
        return loss.sum(), g

    assert ad.finite_diff_check(f, x, h=1e-3, samples=32, rng=rng) < 1e-4


def test_cnn_gradient_converges_as_step_shrinks():
    # Away from kinks the central difference is exact for a piecewise-smooth net.
    model = random_model("cnn-a", 7)
    rng = np.random.default_rng(11)
    x = rng.uniform(size=(2, 1, 16, 16))
    y = np.array([1, 3])

    def f(xx):
        loss, g = ad.loss_and_grad_input(model, xx, y)
        return loss.sum(), g

    assert ad.finite_diff_check(f, x, h=1e-6, samples=32, rng=rng) < 1e-4


def test_activation_pattern_detects_relu_flip():
    tape = ad.Tape()
    ad.relu(tape.leaf(np.array([[0.5, -0.5]])))
    other = ad.Tape()
    ad.relu(other.leaf(np.array([[0.5, 0.5]])))
    assert ad.activation_pattern(tape) != ad.activation_pattern(other)


def test_param_gradient_closed_form_single_linear_layer():
    rng = np.random.default_rng(0)
    spec = models.make_spec("mlp", input_shape=(5,), num_classes=3, hidden=())
    model = models.Model(spec, {"0.dense.w": rng.normal(size=(5, 3)), "0.dense.b": rng.normal(size=3)})
    x = rng.uniform(size=(1, 5))
    y = np.array([2])
    z = x @ model.params["0.dense.w"] + model.params["0.dense.b"]
    p = np.exp(z - z.max()) / np.exp(z - z.max()).sum()
    resid = p[0] - np.eye(3)[2]
    grads = ad.grad_params(model, x, y)
    np.testing.assert_allclose(grads["0.dense.w"], np.outer(x[0], resid), atol=1e-12)
    np.testing.assert_allclose(grads["0.dense.b"], resid, atol=1e-12)


def test_frozen_parameters_are_absent():
    model = random_model("mlp", 0)
    frozen = models.Model(model.spec, model.params, frozen=frozenset({"1.dense.w"}))
    grads = ad.grad_params(frozen, np.zeros((1, 1, 16, 16)), np.array([0]))
    assert "1.dense.w" not in grads
    assert "1.dense.b" in grads


@pytest.mark.parametrize("arch,h", [("mlp", 1e-3), ("cnn-a", 1e-6)])
def test_param_gradient_matches_finite_differences(arch, h):
    model = random_model(arch, 3)
    rng = np.random.default_rng(5)
    x = rng.uniform(size=(3, 1, 16, 16))
    y = np.array([0, 1, 2])
    names = list(model.params)
    flat0 = np.concatenate([model.params[n].ravel() for n in names])
    sizes = np.cumsum([0] + [model.params[n].size for n in names])

    def unflatten(v):
        return {n: v[sizes[i]:sizes[i + 1]].reshape(model.params[n].shape) for i, n in enumerate(names)}

    def f(v):
        m = model.with_params(unflatten(v))
        loss, _ = ad.forward_loss(m, x, y)
        g = ad.grad_params(m, x, y)
        return loss.sum(), np.concatenate([g[n].ravel() for n in names])

    assert ad.finite_diff_check(f, flat0, h=h, samples=32, rng=rng) < 1e-4


def test_finite_diff_check_quadratic_and_constant():
    x = np.random.default_rng(0).normal(size=20)
    assert ad.finite_diff_check(lambda v: (np.sum(v ** 2), 2 * v), x, h=1e-3, samples=20, rng=0) < 1e-9
    assert ad.finite_diff_check(lambda v: (1.0, np.zeros_like(v)), x, rng=0) == 0.0


def test_finite_diff_check_rejects_non_finite():
    with pytest.raises(NonFiniteError):
        ad.finite_diff_check(lambda v: (np.nan, v), np.ones(3), rng=0)
    with pytest.raises(ValueError):
        ad.finite_diff_check(lambda v: (0.0, v), np.ones(3), h=0)


@settings(max_examples=15, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 2**16))
def test_gradient_linearity(a, b, seed):
    model = random_model("mlp", seed % 7)
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(4, 1, 16, 16))
    y = rng.integers(0, 4, size=4)
    _, tape = ad.forward_loss(model, x, y)
    xv = tape.named["x"]
    w1 = np.array([1.0, 0.0, 1.0, 0.0])
    w2 = np.array([0.0, 1.0, 1.0, 1.0])
    (g1,) = tape.gradients(tape.output, [xv], seed=w1)
    (g2,) = tape.gradients(tape.output, [xv], seed=w2)
    (g12,) = tape.gradients(tape.output, [xv], seed=a * w1 + b * w2)
    np.testing.assert_allclose(g12, a * g1 + b * g2, rtol=1e-6, atol=1e-10)


def test_replay_is_bit_identical():
    model = random_model("cnn-a", 2, dtype=np.float32)
    x = np.random.default_rng(0).uniform(size=(4, 1, 16, 16)).astype(np.float32)
    y = np.array([0, 1, 2, 3])
    l1, g1 = ad.loss_and_grad_input(model, x, y)
    l2, g2 = ad.loss_and_grad_input(model, x, y)
    assert l1.tobytes() == l2.tobytes() and g1.tobytes() == g2.tobytes()


def test_relu_kink_uses_zero_subgradient():
    tape = ad.Tape()
    x = tape.leaf(np.array([[0.0, 1.0, -1.0]]))
    out = ad.relu(x)
    for _ in range(2):
        (g,) = tape.gradients(out, [x])
        np.testing.assert_array_equal(g, [[0.0, 1.0, 0.0]])


def test_maxpool_tie_routes_gradient_to_first_maximum():
    tape = ad.Tape()
    x = tape.leaf(np.ones((1, 1, 2, 2)))
    out = ad.maxpool2(x)
    (g,) = tape.gradients(out, [x])
    np.testing.assert_array_equal(g[0, 0], [[1, 0], [0, 0]])


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 6, 5))
    w = rng.normal(size=(4, 3, 3, 3))
    tape = ad.Tape()
    out = ad.conv2d(tape.leaf(x), tape.leaf(w), "same").value
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 4, 6, 5))
    for i in range(6):
        for j in range(5):
            ref[:, :, i, j] = np.einsum("bcij,ocij->bo", xp[:, :, i:i + 3, j:j + 3], w)
    np.testing.assert_allclose(out, ref, atol=1e-12)
