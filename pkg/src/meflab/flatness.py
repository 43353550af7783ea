"""Monte Carlo flatness estimators, transferability gap and image metrics.

Loss providers are duck-typed: anything with ``loss(x, y)`` returning
per-sample losses and ``loss_and_grad(x, y)`` returning ``(loss, grad)``
works, which lets the analytic test losses share code with real models.
Estimators take a single sample ``x`` (no batch axis) and its label.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d


# -- cosine similarity ------------------------------------------------------------

def batch_cos_similarity(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-sample cosine similarity along all but the first axis (0 if either is zero)."""
    a = np.asarray(a, dtype=np.float64).reshape(len(a), -1)
    b = np.asarray(b, dtype=np.float64).reshape(len(b), -1)
    den = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
    num = np.einsum("ij,ij->i", a, b)
    return np.where(den > 0, num / np.where(den > 0, den, 1), 0.0).clip(-1, 1)


def update_cos_similarity(u_prev, u_curr) -> float:
    return float(batch_cos_similarity(np.asarray(u_prev)[None], np.asarray(u_curr)[None])[0])


# -- flatness ---------------------------------------------------------------------

@dataclass(frozen=True)
class FlatnessEstimate:
    value: float
    order: int
    mode: str  # "average" | "worst" | "worst-neighborhood-average"
    xi: float
    samples: int
    stderr: float = 0.0
    gamma: float | None = None
    centers: int | None = None


def _evaluate(model, points, y, order):
    ys = np.full(len(points), y)
    if order == 0:
        return np.asarray(model.loss(points, ys), dtype=np.float64)
    if order == 1:
        return np.asarray(model.loss_and_grad(points, ys)[1], dtype=np.float64)
    raise ValueError("only orders 0 and 1 are supported")


def _draw(x, radius, count, rng, dtype):
    noise = rng.uniform(-radius, radius, size=(count,) + x.shape)
    return (x[None] + noise).astype(dtype)


def _dtype(model):
    return getattr(model, "dtype", np.float64)


def _deviations(model, x, y, points, order) -> np.ndarray:
    centre = _evaluate(model, x[None].astype(points.dtype), y, order)[0]
    vals = _evaluate(model, points, y, order)
    if order == 0:
        return np.abs(vals - centre)
    return np.linalg.norm((vals - centre).reshape(len(vals), -1), axis=1)


def flatness_samples(model, x, y, xi: float, order: int, m: int, rng) -> np.ndarray:
    """Per-draw deviations ``||grad^n J(x') - grad^n J(x)||`` for ``m`` uniform draws in B_xi(x)."""
    x = np.asarray(x)
    if xi == 0:
        return np.zeros(m)
    return _deviations(model, x, y, _draw(x, xi, m, np.random.default_rng(rng), _dtype(model)), order)


def avg_flatness(model, x, y, xi: float, order: int, m: int, rng) -> FlatnessEstimate:
    if m < 1 or xi < 0:
        raise ValueError("need m >= 1 and xi >= 0")
    d = flatness_samples(model, x, y, xi, order, m, rng)
    se = float(d.std(ddof=1) / math.sqrt(m)) if m > 1 else 0.0
    return FlatnessEstimate(float(d.mean()), order, "average", xi, m, se)


def worst_flatness(model, x, y, xi: float, order: int, m: int, rng) -> FlatnessEstimate:
    """Max over ``m`` uniform draws; a lower bound on the true supremum."""
    if m < 1 or xi < 0:
        raise ValueError("need m >= 1 and xi >= 0")
    d = flatness_samples(model, x, y, xi, order, m, rng)
    return FlatnessEstimate(float(d.max()), order, "worst", xi, m)


def wna_flatness(model, x, y, gamma: float, xi: float, k: int, m: int, rng) -> FlatnessEstimate:
    """Worst-neighborhood average zeroth-order flatness.

    Maximum over ``k`` uniform centres in B_gamma(x) of the average-case
    estimate with radius ``xi`` and ``m`` draws around each centre.
    """
    x = np.asarray(x)
    rng = np.random.default_rng(rng)
    if gamma == 0:
        centres = np.repeat(x[None], k, axis=0)
    else:
        centres = _draw(x, gamma, k, rng, x.dtype)
    best = 0.0
    for c in centres:
        best = max(best, avg_flatness(model, c, y, xi, 0, m, rng).value)
    return FlatnessEstimate(best, 0, "worst-neighborhood-average", xi, m, gamma=gamma, centers=k)


# -- transferability gap ------------------------------------------------------------

@dataclass(frozen=True)
class AtgRecord:
    atg: np.ndarray | float
    surrogate_loss: np.ndarray | float
    target_loss: np.ndarray | float
    surrogate_clean_loss: np.ndarray | float
    target_clean_loss: np.ndarray | float


def atg(model_f, model_fprime, x, delta, y) -> AtgRecord:
    """Target loss minus surrogate loss at ``x + delta`` (batched over the first axis)."""
    x = np.asarray(x)
    xd = x + np.asarray(delta, dtype=x.dtype)
    y = np.asarray(y)
    sur = np.asarray(model_f.loss(xd, y), dtype=np.float64)
    tgt = np.asarray(model_fprime.loss(xd, y), dtype=np.float64)
    return AtgRecord(
        atg=tgt - sur,
        surrogate_loss=sur,
        target_loss=tgt,
        surrogate_clean_loss=np.asarray(model_f.loss(x, y), dtype=np.float64),
        target_clean_loss=np.asarray(model_fprime.loss(x, y), dtype=np.float64),
    )


@dataclass(frozen=True)
class DecompositionCheck:
    a: float  # surrogate deviation between x' and x
    b: float  # target deviation between x' and x
    c: float  # cross-model discrepancy at x'
    t: float  # cross-model discrepancy at x
    slack: float  # a + b + c - t


@dataclass(frozen=True)
class Theorem1Report:
    order: int
    xi: float
    checks: list
    flatness_f: float
    flatness_fprime: float
    discrepancy: float

    @property
    def min_slack(self) -> float:
        return min(c.slack for c in self.checks)

    def bound_term(self, delta_norm: float) -> float:
        """``||delta||^n / n! * (R_F + C_n + R_F')`` for this report's order."""
        return delta_norm ** self.order / math.factorial(self.order) * (
            self.flatness_f + self.discrepancy + self.flatness_fprime)


def theorem1_check(model_f, model_fprime, x, y, xi: float, order: int, m: int, rng) -> Theorem1Report:
    """Check the triangle-inequality step of the flatness bound draw by draw.

    For each uniform draw x' in B_xi(x) computes the surrogate and target
    deviations (a, b), the cross-model discrepancy at x' (c) and at x (t).
    Since ``t <= a + b + c`` exactly, every slack must be non-negative up to
    rounding.
    """
    x = np.asarray(x)
    rng = np.random.default_rng(rng)
    pts = _draw(x, xi, m, rng, _dtype(model_f)) if xi > 0 else np.repeat(x[None], m, axis=0)
    centre = x[None].astype(pts.dtype)
    f0 = _evaluate(model_f, centre, y, order)[0]
    g0 = _evaluate(model_fprime, centre, y, order)[0]
    f = _evaluate(model_f, pts, y, order)
    g = _evaluate(model_fprime, pts, y, order)

    def norm(v):
        return np.abs(v) if order == 0 else np.linalg.norm(v.reshape(len(v), -1), axis=1)

    a = norm(f - f0)
    b = norm(g - g0)
    c = norm(g - f)
    t = float(norm((g0 - f0)[None])[0])
    slack = a + b + c - t
    checks = [DecompositionCheck(float(ai), float(bi), float(ci), t, float(si)) for ai, bi, ci, si in zip(a, b, c, slack)]
    return Theorem1Report(order, xi, checks, float(a.mean()), float(b.mean()), float(c.mean()))


# -- attack success rate -----------------------------------------------------------

def clean_correct_mask(model, x, y) -> np.ndarray:
    return model.predict(x) == np.asarray(y)


def asr(target_model, adversarials, labels, clean_correct_mask=None) -> float:
    """Fraction of clean-correct samples that the target misclassifies after attack.

    Returns NaN when no sample is clean-correct.
    """
    labels = np.asarray(labels)
    fooled = target_model.predict(adversarials) != labels
    mask = np.ones(len(labels), bool) if clean_correct_mask is None else np.asarray(clean_correct_mask, bool)
    if not mask.any():
        return float("nan")
    return float(fooled[mask].mean())


# -- landscape ------------------------------------------------------------------------

@dataclass(frozen=True)
class LandscapeProfile:
    magnitudes: np.ndarray  # (M,)
    deltas: np.ndarray  # (M, D): J(clip(x + m d)) - J(x)

    @property
    def directions(self) -> int:
        return self.deltas.shape[1]

    @property
    def mean(self) -> np.ndarray:
        return self.deltas.mean(axis=1)


def landscape_profile(model, x_adv, y, magnitudes, directions: int, rng) -> LandscapeProfile:
    """Loss deltas along ``directions`` random unit-L2 Gaussian directions.

    The same directions are reused for every magnitude.
    """
    x_adv = np.asarray(x_adv)
    rng = np.random.default_rng(rng)
    mags = np.asarray(magnitudes, dtype=np.float64)
    d = rng.standard_normal((directions,) + x_adv.shape)
    d /= np.linalg.norm(d.reshape(directions, -1), axis=1).reshape((directions,) + (1,) * x_adv.ndim)
    pts = np.clip(x_adv[None, None] + mags.reshape(-1, 1, *([1] * x_adv.ndim)) * d[None], 0, 1)
    pts = np.concatenate([x_adv[None], pts.reshape((-1,) + x_adv.shape)]).astype(x_adv.dtype)
    # one batch for base and probes, so BLAS blocking cannot differ between them
    losses = np.asarray(model.loss(pts, np.full(len(pts), y)), dtype=np.float64)
    deltas = (losses[1:] - losses[0]).reshape(len(mags), directions)
    deltas[mags == 0] = 0.0
    return LandscapeProfile(mags, deltas)


# -- image quality --------------------------------------------------------------------

def _gaussian_window(size=11, sigma=1.5):
    r = np.arange(size) - size // 2
    w = np.exp(-(r ** 2) / (2 * sigma ** 2))
    return w / w.sum()


def ssim(a, b, data_range: float = 1.0) -> float:
    """Single-channel SSIM with an 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03.

    Local statistics use population (co)variances; the mean is taken over
    the region where the window fits entirely inside the image.
    """
    a = np.asarray(a, dtype=np.float64).squeeze()
    b = np.asarray(b, dtype=np.float64).squeeze()
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError("ssim expects two equally sized 2-D images")
    w = _gaussian_window()

    def filt(img):
        return correlate1d(correlate1d(img, w, axis=0, mode="reflect"), w, axis=1, mode="reflect")

    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    pad = 5
    return float(s[pad:-pad, pad:-pad].mean())


def psnr(a, b) -> float:
    """``10 log10(1 / MSE)`` for unit dynamic range; ``inf`` for identical images."""
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    return math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)
