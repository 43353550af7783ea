import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from meflab import flatness as fl

from conftest import LinearLoss, Quadratic1D, random_model


class SquareLinear:
    """1-D model J(x) = (w x - y)^2."""

    dtype = np.float64

    def __init__(self, w):
        self.w = w

    def loss(self, x, y):
        return (self.w * np.asarray(x, np.float64).reshape(len(x)) - np.asarray(y)) ** 2

    def loss_and_grad(self, x, y):
        r = self.w * np.asarray(x, np.float64).reshape(len(x)) - np.asarray(y)
        return r ** 2, (2 * self.w * r).reshape(np.shape(x))


class CenteredQuadratic(Quadratic1D):
    def loss(self, x, y):
        return super().loss(np.asarray(x) - 0.5, y)


class RandomClassifier:
    def __init__(self, k, seed):
        self.k, self.rng = k, np.random.default_rng(seed)

    def predict(self, x):
        return self.rng.integers(0, self.k, len(x))


# -- cosine similarity -----------------------------------------------------------------

def test_cosine_similarity_cases():
    u = np.array([1.0, 2.0, -3.0])
    assert fl.update_cos_similarity(u, u) == pytest.approx(1.0)
    assert fl.update_cos_similarity(u, -u) == pytest.approx(-1.0)
    assert fl.update_cos_similarity(np.eye(3)[0], np.eye(3)[1]) == 0.0
    assert fl.update_cos_similarity(u, np.zeros(3)) == 0.0


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=4, max_size=4), st.lists(st.floats(-10, 10), min_size=4, max_size=4))
def test_cosine_similarity_bounded(a, b):
    assert -1.0 <= fl.update_cos_similarity(np.array(a), np.array(b)) <= 1.0


# -- analytic flatness oracles ---------------------------------------------------------

def test_zero_radius_is_exactly_zero(trained_mlp):
    x = np.full((1, 16, 16), 0.5, np.float32)
    for order in (0, 1):
        assert fl.avg_flatness(trained_mlp, x, 0, 0.0, order, 8, 0).value == 0.0
        assert fl.worst_flatness(trained_mlp, x, 0, 0.0, order, 8, 0).value == 0.0
    assert fl.wna_flatness(trained_mlp, x, 0, 0.1, 0.0, 4, 8, 0).value == 0.0


@pytest.mark.parametrize("xi", [0.1, 0.5, 2.0])
def test_quadratic_average_is_xi_squared_over_six(xi):
    est = fl.avg_flatness(Quadratic1D(), np.zeros(1), 0, xi, 0, 10_000, 0)
    assert est.value == pytest.approx(xi ** 2 / 6, rel=0.05)
    assert est.stderr > 0 and est.mode == "average"


@pytest.mark.parametrize("xi", [0.1, 0.5, 2.0])
def test_quadratic_worst_is_xi_squared_over_two(xi):
    est = fl.worst_flatness(Quadratic1D(), np.zeros(1), 0, xi, 0, 10_000, 0)
    assert est.value == pytest.approx(xi ** 2 / 2, rel=0.05)
    assert est.value <= xi ** 2 / 2


def test_linear_loss_has_zero_first_order_flatness():
    model = LinearLoss(np.array([0.3, -1.0, 2.0]))
    assert fl.avg_flatness(model, np.full(3, 0.5), 0, 0.7, 1, 64, 0).value == 0.0


def test_worst_monotone_in_nested_draws(trained_mlp):
    x = np.full((1, 16, 16), 0.4, np.float32)
    small = fl.worst_flatness(trained_mlp, x, 1, 0.2, 0, 16, 7).value
    large = fl.worst_flatness(trained_mlp, x, 1, 0.2, 0, 128, 7).value
    assert large >= small


def test_worst_at_least_average_on_shared_draws(trained_mlp):
    x = np.full((1, 16, 16), 0.4, np.float32)
    for order in (0, 1):
        assert (fl.worst_flatness(trained_mlp, x, 2, 0.2, order, 32, 3).value
                >= fl.avg_flatness(trained_mlp, x, 2, 0.2, order, 32, 3).value)


@pytest.mark.parametrize("order", [0, 1])
def test_estimates_non_negative(order):
    model = random_model("mlp", 0)
    x = np.random.default_rng(0).uniform(size=(1, 16, 16))
    est = fl.avg_flatness(model, x, 1, 0.3, order, 16, 0)
    assert est.value >= 0 and est.stderr >= 0


def test_standard_error_shrinks_as_root_m():
    model = Quadratic1D()
    x = np.array([0.3])
    se = {m: fl.avg_flatness(model, x, 0, 0.5, 0, m, 11).stderr for m in (64, 256, 1024)}
    assert se[64] / se[256] == pytest.approx(2.0, rel=0.3)
    assert se[256] / se[1024] == pytest.approx(2.0, rel=0.3)


def test_xi_monotone_under_draw_reuse():
    model = Quadratic1D()
    x = np.zeros(5)
    values = [fl.avg_flatness(model, x, 0, xi, 0, 256, 5).value for xi in (0.05, 0.1, 0.2, 0.4)]
    assert values == sorted(values)


def test_wna_with_zero_gamma_reduces_to_average(trained_mlp):
    x = np.full((1, 16, 16), 0.3, np.float32)
    wna = fl.wna_flatness(trained_mlp, x, 0, 0.0, 0.2, 1, 32, 9)
    avg = fl.avg_flatness(trained_mlp, x, 0, 0.2, 0, 32, 9)
    assert wna.value == avg.value
    assert (wna.gamma, wna.centers) == (0.0, 1)


def test_wna_quadratic_dense_grid_oracle():
    gamma, xi = 1.0, 0.5
    u = np.linspace(-xi, xi, 200_001)
    oracle = max(np.mean(np.abs(c * u + u ** 2 / 2)) for c in np.linspace(-gamma, gamma, 401))
    est = fl.wna_flatness(Quadratic1D(), np.zeros(1), 0, gamma, xi, 64, 4096, 0)
    assert est.value == pytest.approx(oracle, rel=0.10)


# -- ATG -------------------------------------------------------------------------------

def test_atg_identical_models_is_zero(trained_mlp, shapes):
    x, y = shapes[1].images[:5], shapes[1].labels[:5]
    rec = fl.atg(trained_mlp, trained_mlp, x, np.full_like(x, 0.02), y)
    assert not np.any(rec.atg)


def test_atg_zero_delta_is_clean_difference():
    f, g = random_model("mlp", 0), random_model("mlp", 1)
    x = np.random.default_rng(0).uniform(size=(4, 1, 16, 16))
    y = np.array([0, 1, 2, 3])
    rec = fl.atg(f, g, x, np.zeros_like(x), y)
    np.testing.assert_array_equal(rec.atg, rec.target_clean_loss - rec.surrogate_clean_loss)


def test_atg_hand_computed_linear_square_loss():
    rec = fl.atg(SquareLinear(1.0), SquareLinear(2.0), np.zeros((1, 1)), np.full((1, 1), 0.5), np.zeros(1))
    assert rec.surrogate_loss[0] == 0.25 and rec.target_loss[0] == 1.0
    assert rec.atg[0] == 0.75


def test_atg_antisymmetry_exact():
    f, g = random_model("cnn-a", 0), random_model("mlp", 1)
    rng = np.random.default_rng(2)
    x = rng.uniform(size=(6, 1, 16, 16))
    d = rng.uniform(-0.1, 0.1, size=x.shape)
    y = rng.integers(0, 4, 6)
    assert np.array_equal(fl.atg(f, g, x, d, y).atg, -fl.atg(g, f, x, d, y).atg)


# -- bound decomposition ----------------------------------------------------------------

def test_theorem1_same_model():
    f = random_model("mlp", 0)
    x = np.random.default_rng(0).uniform(size=(1, 16, 16))
    rep = fl.theorem1_check(f, f, x, 1, 0.1, 1, 50, 0)
    assert all(c.c == 0 and c.t == 0 for c in rep.checks)
    assert all(c.slack == pytest.approx(c.a + c.b) for c in rep.checks)


@pytest.mark.parametrize("order", [0, 1])
def test_theorem1_slack_nonnegative(order):
    f, g = random_model("mlp", 3), random_model("cnn-a", 4)
    x = np.random.default_rng(1).uniform(size=(1, 16, 16))
    rep = fl.theorem1_check(f, g, x, 2, 0.2, order, 200, 5)
    assert len(rep.checks) == 200
    assert rep.min_slack >= -1e-5
    assert rep.bound_term(0.0) == (rep.flatness_f + rep.discrepancy + rep.flatness_fprime if order == 0 else 0.0)


# -- ASR -------------------------------------------------------------------------------

def test_unperturbed_inputs_have_zero_asr(trained_mlp, shapes):
    x, y = shapes[1].images, shapes[1].labels
    mask = fl.clean_correct_mask(trained_mlp, x, y)
    assert fl.asr(trained_mlp, x, y, mask) == 0.0


def test_random_classifier_asr_combinatorial():
    k, n = 4, 20_000
    model = RandomClassifier(k, 0)
    x = np.zeros((n, 1))
    y = np.zeros(n, int)
    mask = fl.clean_correct_mask(model, x, y)
    assert fl.asr(model, x, y, mask) == pytest.approx((k - 1) / k, abs=0.02)


def test_asr_empty_mask_is_nan(trained_mlp, shapes):
    x, y = shapes[1].images[:3], shapes[1].labels[:3]
    assert math.isnan(fl.asr(trained_mlp, x, y, np.zeros(3, bool)))


# -- landscape ---------------------------------------------------------------------------

def test_landscape_zero_magnitude_row(trained_mlp, shapes):
    x, y = shapes[1].images[0], shapes[1].labels[0]
    prof = fl.landscape_profile(trained_mlp, x, y, [-1.0, 0.0, 1.0], 5, 0)
    assert prof.deltas.shape == (3, 5) and prof.directions == 5
    assert not prof.deltas[1].any()


def test_landscape_even_on_centered_quadratic():
    mags = np.linspace(-0.3, 0.3, 7)
    prof = fl.landscape_profile(CenteredQuadratic(), np.full(4, 0.5), 0, mags, 6, 1)
    np.testing.assert_allclose(prof.deltas, prof.deltas[::-1], atol=1e-12)
    np.testing.assert_allclose(prof.mean, mags ** 2 / 2, atol=1e-12)


# -- image quality -----------------------------------------------------------------------

def test_ssim_matches_reference_implementation():
    metrics = pytest.importorskip("skimage.metrics")
    rng = np.random.default_rng(0)
    for _ in range(5):
        a = rng.uniform(size=(16, 16))
        b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
        ref = metrics.structural_similarity(a, b, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                            use_sample_covariance=False)
        assert fl.ssim(a, b) == pytest.approx(ref, abs=1e-9)


def test_ssim_identity_and_constant_images():
    a = np.random.default_rng(0).uniform(size=(16, 16))
    assert fl.ssim(a, a) == pytest.approx(1.0)
    c = 0.3
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    expected = (2 * c * (1 - c) + c1) * c2 / ((c ** 2 + (1 - c) ** 2 + c1) * c2)
    assert fl.ssim(np.full((16, 16), c), np.full((16, 16), 1 - c)) == pytest.approx(expected)


def test_psnr():
    a = np.random.default_rng(0).uniform(0.2, 0.8, size=(16, 16))
    assert fl.psnr(a, a) == math.inf
    signs = np.where(np.random.default_rng(1).uniform(size=a.shape) < 0.5, -1, 1)
    assert fl.psnr(a, a + 0.05 * signs) == pytest.approx(20 * math.log10(1 / 0.05))
