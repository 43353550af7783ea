"""L-infinity transfer attacks: classic baselines, flatness baselines and MEF.

Every method shares one outer loop: a method-specific routine produces the
per-iteration increment (an L1-normalized ascent direction), the loop folds
it into outer momentum, takes a signed step of size ``alpha`` and projects
back onto the budget ball and the valid pixel range.

Each sample owns its RNG stream (see :mod:`meflab.seeding`), so a sample's
adversarial does not depend on which other samples share its batch.
"""
from __future__ import annotations

import struct
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from functools import lru_cache
from importlib import resources

import numpy as np

from .errors import ConfigError, FormatError, ShapeError
from .flatness import batch_cos_similarity
from .seeding import sample_rngs

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

METHODS = ("pgd", "fgsm", "mi", "ni", "rap", "fem", "tpa", "pgn", "mef")
NCS_VARIANTS = ("as-algorithm", "descent")
GRAD_CHUNK = 2048


@lru_cache(maxsize=None)
def _presets() -> dict:
    return tomllib.loads(resources.files("meflab").joinpath("presets.toml").read_text())


@dataclass(frozen=True)
class AttackConfig:
    method: str
    eps: float
    iters: int = 10
    alpha: float | None = None  # None means eps / iters
    samples: int = 1
    gamma: float = 0.0
    xi: float = 0.0
    mu_outer: float = 0.0
    mu_inner: float = 0.0
    lam: float = 0.0
    inner_steps: int = 0
    late_start: int = 0
    fd_step: float | None = None  # None means 0.01 * xi
    seed: int = 0
    ncs_variant: str = "as-algorithm"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown attack method {self.method!r}")
        if self.eps < 0:
            raise ConfigError("eps must be non-negative")
        if self.iters < 1 or self.samples < 1:
            raise ConfigError("iters and samples must be >= 1")
        if min(self.gamma, self.xi, self.mu_outer, self.mu_inner, self.lam) < 0:
            raise ConfigError("radii, momenta and lam must be non-negative")
        if self.alpha is not None and self.alpha <= 0:
            raise ConfigError("alpha must be positive")
        if self.inner_steps < 0 or self.late_start < 0:
            raise ConfigError("inner_steps and late_start must be non-negative")
        if self.fd_step is not None and self.fd_step <= 0:
            raise ConfigError("fd_step must be positive")
        if self.ncs_variant not in NCS_VARIANTS:
            raise ConfigError(f"ncs_variant must be one of {NCS_VARIANTS}")
        if self.method == "fgsm" and self.iters != 1:
            raise ConfigError("fgsm is single-step; use pgd for iters > 1")

    @property
    def step_size(self) -> float:
        return self.eps / self.iters if self.alpha is None else self.alpha

    @property
    def fd_radius(self) -> float:
        # 0.01 * xi, floored so the difference stays resolvable in float32
        if self.fd_step is not None:
            return self.fd_step
        return max(0.01 * self.xi, 1e-4)

    @classmethod
    def preset(cls, method: str, eps: float, iters: int = 10, **overrides) -> "AttackConfig":
        """Config for ``method`` with desk-scale defaults from ``presets.toml``."""
        if method not in METHODS:
            raise ConfigError(f"unknown attack method {method!r}")
        if method == "fgsm":
            iters = 1
        values = dict(_presets().get(method, {}))
        if "gamma_eps" in values:
            values["gamma"] = values.pop("gamma_eps") * eps
        if "xi_eps" in values:
            values["xi"] = values.pop("xi_eps") * eps
        if "late_start_frac" in values:
            values["late_start"] = int(values.pop("late_start_frac") * iters)
        values.update(overrides)
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown attack options {sorted(unknown)}")
        return cls(method=method, eps=eps, iters=iters, **values)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AttackState:
    x: np.ndarray
    y: np.ndarray
    x_adv: np.ndarray
    g_outer: np.ndarray
    g_inner: np.ndarray | None = None  # (B, N, ...) for MEF
    t: int = 0
    prev_increment: np.ndarray | None = None
    telemetry: dict = field(default_factory=lambda: {"loss": [], "update_cos_sim": [], "bp_count": [], "wall_time": []})


@dataclass(frozen=True)
class AttackResult:
    x_adv: np.ndarray
    telemetry: dict  # name -> (T, B) array
    config: AttackConfig
    seed: int
    bp_count: float  # gradient evaluations per sample

    def telemetry_rows(self, sample_ids=None):
        """Rows of (sample_id, t, loss, update_cos_sim, bp_count)."""
        t_count, batch = self.telemetry["loss"].shape
        ids = range(batch) if sample_ids is None else sample_ids
        for b, sid in enumerate(ids):
            for t in range(t_count):
                yield (int(sid), t, float(self.telemetry["loss"][t, b]),
                       float(self.telemetry["update_cos_sim"][t, b]), float(self.telemetry["bp_count"][t, b]))


class GradientOracle:
    """Wraps a loss provider and counts gradient evaluations per input row."""

    def __init__(self, model):
        self.model = model
        self.grad_rows = 0

    @property
    def dtype(self):
        return getattr(self.model, "dtype", np.float64)

    def loss(self, x, y):
        return self.model.loss(x, y)

    def loss_and_grad(self, x, y):
        self.grad_rows += len(x)
        if len(x) <= GRAD_CHUNK:
            return self.model.loss_and_grad(x, y)
        parts = [self.model.loss_and_grad(x[i:i + GRAD_CHUNK], y[i:i + GRAD_CHUNK]) for i in range(0, len(x), GRAD_CHUNK)]
        return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])

    def grad(self, x, y):
        return self.loss_and_grad(x, y)[1]


# -- elementary operations ----------------------------------------------------------

def _per_sample_sum(a: np.ndarray, lead: int = 1) -> np.ndarray:
    return a.reshape(a.shape[:lead] + (-1,)).sum(axis=-1).reshape(a.shape[:lead] + (1,) * (a.ndim - lead))


def l1_normalize(g: np.ndarray, lead: int = 1) -> np.ndarray:
    """Divide each sample (the first ``lead`` axes index samples) by its L1 norm.

    Samples whose L1 norm is below 1e-12 map to zeros.
    """
    g = np.asarray(g)
    norm = _per_sample_sum(np.abs(g), lead)
    safe = np.where(norm < 1e-12, 1, norm)
    return np.where(norm < 1e-12, 0, g / safe).astype(g.dtype, copy=False)


def project(x_cand, x, eps):
    """Clamp to the L-infinity ball of radius ``eps`` around ``x``, then to [0, 1]."""
    return np.clip(np.clip(x_cand, x - eps, x + eps), 0, 1)


def _uniform(rngs, n: int, shape: tuple, radius: float, dtype) -> np.ndarray:
    """Per-sample i.i.d. Uniform[-radius, radius] noise, shape (B, n, *shape)."""
    if radius == 0:
        return np.zeros((len(rngs), n) + shape, dtype=dtype)
    return np.stack([r.uniform(-radius, radius, size=(n,) + shape) for r in rngs]).astype(dtype)


def _grads_at(oracle, points: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gradients at (B, N, ...) points, each row labelled with its sample's label."""
    b, n = points.shape[:2]
    flat = points.reshape((b * n,) + points.shape[2:])
    g = oracle.grad(flat, np.repeat(y, n))
    return g.reshape(points.shape)


def grad_norm_fd(model, x, y, r: float, grad: np.ndarray | None = None) -> np.ndarray:
    """Directional finite-difference estimate of the gradient of ||grad J||_2.

    Returns ``(grad J(x + r u) - grad J(x)) / r`` with ``u`` the unit gradient
    direction; samples with a vanishing gradient get zeros.  Pass ``grad`` to
    reuse an already computed gradient at ``x``.
    """
    oracle = model if isinstance(model, GradientOracle) else GradientOracle(model)
    x = np.asarray(x)
    if not np.asarray(r, dtype=x.dtype) > 0:
        raise ValueError(f"finite-difference radius {r} is not positive in {x.dtype}")
    g = oracle.grad(x, y) if grad is None else grad
    norm = np.sqrt(_per_sample_sum(np.square(g.astype(np.float64))))
    live = norm >= 1e-12
    u = np.where(live, g / np.where(live, norm, 1), 0).astype(x.dtype)
    g2 = oracle.grad(x + np.asarray(r, dtype=x.dtype) * u, y)
    return np.where(live, (g2 - g) / np.asarray(r, dtype=g.dtype), 0).astype(g.dtype)


def expected_bp(cfg: AttackConfig) -> int:
    """Closed-form gradient evaluations per sample."""
    t = cfg.iters
    if cfg.method in ("pgd", "fgsm", "mi", "ni"):
        return t
    if cfg.method == "rap":
        return t + cfg.inner_steps * max(0, t - cfg.late_start)
    if cfg.method in ("fem", "mef"):
        return cfg.samples * t
    return 2 * cfg.samples * t  # pgn, tpa


# -- per-method increments ---------------------------------------------------------

def _inc_gradient(state, oracle, cfg, rngs):
    return l1_normalize(oracle.grad(state.x_adv, state.y))


def _inc_nesterov(state, oracle, cfg, rngs):
    alpha = np.asarray(cfg.step_size * cfg.mu_outer, dtype=state.x_adv.dtype)
    return l1_normalize(oracle.grad(state.x_adv + alpha * state.g_outer, state.y))


def _inc_rap(state, oracle, cfg, rngs):
    if state.t < cfg.late_start or cfg.inner_steps == 0:
        return l1_normalize(oracle.grad(state.x_adv, state.y))
    n = rap_inner(oracle, state.x_adv, state.y, cfg.xi, cfg.inner_steps)
    return l1_normalize(oracle.grad(state.x_adv + n, state.y))


def rap_inner(oracle, x_adv, y, xi: float, steps: int) -> np.ndarray:
    """Signed gradient descent for the reverse perturbation inside B_xi, kept in [0, 1]."""
    beta = np.asarray(2.0 * xi / steps, dtype=x_adv.dtype)
    n = np.zeros_like(x_adv)
    for _ in range(steps):
        g = oracle.grad(x_adv + n, y)
        n = np.clip(n - beta * np.sign(g), -xi, xi)
        n = np.clip(x_adv + n, 0, 1) - x_adv
    return n


def _neighbours(state, cfg, rngs):
    noise = _uniform(rngs, cfg.samples, state.x.shape[1:], cfg.xi, state.x_adv.dtype)
    return np.clip(state.x_adv[:, None] + noise, 0, 1)


def _inc_fem(state, oracle, cfg, rngs):
    g = _grads_at(oracle, _neighbours(state, cfg, rngs), state.y)
    return l1_normalize(g.mean(axis=1))


def _inc_penalized(sign):
    def increment(state, oracle, cfg, rngs):
        pts = _neighbours(state, cfg, rngs)
        b, n = pts.shape[:2]
        flat = pts.reshape((b * n,) + pts.shape[2:])
        yy = np.repeat(state.y, n)
        g = oracle.grad(flat, yy)
        fd = grad_norm_fd(oracle, flat, yy, cfg.fd_radius, grad=g)
        d = g + np.asarray(sign * cfg.lam, dtype=g.dtype) * fd
        return l1_normalize(d.reshape(pts.shape), lead=2).mean(axis=1)
    return increment


# -- MEF building blocks -------------------------------------------------------------

def ncs_step(state: AttackState, cfg: AttackConfig, rngs) -> np.ndarray:
    """Neighborhood conditional sampling: N points per sample, shape (B, N, ...).

    Uniform draws in B_gamma(x_adv) are shifted by ``xi * sign(g_inner)``
    (``+`` for the ``as-algorithm`` variant, ``-`` for ``descent``) and clamped
    to B_gamma(x_adv) and [0, 1].
    """
    x_adv = state.x_adv
    dt = x_adv.dtype
    centre = x_adv[:, None]
    pts = centre + _uniform(rngs, cfg.samples, state.x.shape[1:], cfg.gamma, dt)
    if cfg.xi > 0:
        sgn = 1 if cfg.ncs_variant == "as-algorithm" else -1
        pts = pts + np.asarray(sgn * cfg.xi, dtype=dt) * np.sign(state.g_inner)
    gamma = np.asarray(cfg.gamma, dtype=dt)
    return np.clip(np.clip(pts, centre - gamma, centre + gamma), 0, 1)


def gbo_update(state: AttackState, grads: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    """Inner slots <- l1_normalize(g) - mu_inner * slots; reuses outer gradients only."""
    normed = l1_normalize(grads, lead=2)
    state.g_inner = normed - np.asarray(cfg.mu_inner, dtype=normed.dtype) * state.g_inner
    return state.g_inner


def _inc_mef(state, oracle, cfg, rngs):
    pts = ncs_step(state, cfg, rngs)
    g = _grads_at(oracle, pts, state.y)
    gbo_update(state, g, cfg)
    return l1_normalize(g, lead=2).mean(axis=1)


_INCREMENTS = {
    "pgd": _inc_gradient,
    "fgsm": _inc_gradient,
    "mi": _inc_gradient,
    "ni": _inc_nesterov,
    "rap": _inc_rap,
    "fem": _inc_fem,
    "pgn": _inc_penalized(-1.0),
    "tpa": _inc_penalized(+1.0),
    "mef": _inc_mef,
}


# -- driver ---------------------------------------------------------------------------

def _check_inputs(model, x, y):
    x = np.asarray(x)
    y = np.asarray(y)
    spec = getattr(model, "spec", None)
    if spec is not None and tuple(x.shape[1:]) != spec.input_shape:
        raise ShapeError(f"batch {x.shape[1:]} does not match model input {spec.input_shape}", "input")
    if len(x) != len(y):
        raise ShapeError(f"{len(x)} inputs but {len(y)} labels", "input")
    return x, y


def run_attack(method: str, model, x, y, cfg: AttackConfig, sample_ids=None, callback=None) -> AttackResult:
    """Run ``method`` against ``model`` and return adversarials plus telemetry.

    ``sample_ids`` select the per-sample RNG streams (default ``0..B-1``).
    ``callback(t, x_adv)`` is invoked after every update.
    """
    if method != cfg.method:
        cfg = replace(cfg, method=method)
    x, y = _check_inputs(model, x, y)
    oracle = GradientOracle(model)
    dtype = oracle.dtype
    x = x.astype(dtype)
    batch = len(x)
    ids = np.arange(batch) if sample_ids is None else np.asarray(sample_ids)
    rngs = sample_rngs(cfg.seed, ids, method)
    state = AttackState(x=x, y=y, x_adv=x.copy(), g_outer=np.zeros_like(x))
    if method == "mef":
        state.g_inner = np.zeros((batch, cfg.samples) + x.shape[1:], dtype=dtype)
    increment = _INCREMENTS[method]
    alpha = np.asarray(cfg.step_size, dtype=dtype)
    mu = np.asarray(cfg.mu_outer, dtype=dtype)
    eps = np.asarray(cfg.eps, dtype=dtype)
    start = time.perf_counter()
    for t in range(cfg.iters):
        state.t = t
        inc = increment(state, oracle, cfg, rngs)
        state.g_outer = mu * state.g_outer + inc
        state.x_adv = project(state.x_adv + alpha * np.sign(state.g_outer), x, eps)
        cos = (np.full(batch, np.nan) if state.prev_increment is None
               else batch_cos_similarity(state.prev_increment, inc))
        state.prev_increment = inc
        tel = state.telemetry
        tel["loss"].append(np.asarray(oracle.loss(state.x_adv, y), dtype=np.float64))
        tel["update_cos_sim"].append(cos)
        tel["bp_count"].append(np.full(batch, oracle.grad_rows / batch))
        tel["wall_time"].append(np.full(batch, time.perf_counter() - start))
        if callback is not None:
            callback(t, state.x_adv)
    telemetry = {k: np.stack(v) for k, v in state.telemetry.items()}
    return AttackResult(state.x_adv, telemetry, cfg, cfg.seed, oracle.grad_rows / batch)


def _method_entry(name):
    def attack(model, x, y, cfg: AttackConfig, sample_ids=None, callback=None) -> AttackResult:
        return run_attack(name, model, x, y, cfg, sample_ids, callback)
    attack.__name__ = name
    attack.__doc__ = f"Run the {name.upper()} attack; see :func:`run_attack`."
    return attack


pgd = _method_entry("pgd")
mi = _method_entry("mi")
ni = _method_entry("ni")
rap = _method_entry("rap")
fem = _method_entry("fem")
pgn = _method_entry("pgn")
tpa = _method_entry("tpa")
mef = _method_entry("mef")


def fgsm(model, x, y, eps: float, seed: int = 0) -> AttackResult:
    return run_attack("fgsm", model, x, y, AttackConfig("fgsm", eps, iters=1, seed=seed))


# -- adversarial batch files -------------------------------------------------------

ADV_MAGIC = b"MEFA"
ADV_VERSION = 1


def save_advs(path, x_adv: np.ndarray, seed: int) -> None:
    """``MEFA`` | u32 version | u32 ndim | u32 dims | f32 LE payload | u64 seed."""
    x_adv = np.ascontiguousarray(x_adv, dtype="<f4")
    with open(path, "wb") as f:
        f.write(ADV_MAGIC)
        f.write(struct.pack("<II", ADV_VERSION, x_adv.ndim))
        f.write(struct.pack(f"<{x_adv.ndim}I", *x_adv.shape))
        f.write(x_adv.tobytes())
        f.write(struct.pack("<Q", seed & 0xFFFFFFFFFFFFFFFF))


def load_advs(path):
    """Return ``(x_adv, seed)``."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 12 or raw[:4] != ADV_MAGIC:
        raise FormatError(f"{path}: bad magic")
    version, ndim = struct.unpack_from("<II", raw, 4)
    if version != ADV_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    head = 12 + 4 * ndim
    if len(raw) < head:
        raise FormatError(f"{path}: truncated shape header")
    shape = struct.unpack_from(f"<{ndim}I", raw, 12)
    count = int(np.prod(shape))
    if len(raw) != head + 4 * count + 8:
        raise FormatError(f"{path}: size {len(raw)} does not match shape {shape}")
    x = np.frombuffer(raw, dtype="<f4", count=count, offset=head).astype(np.float32).reshape(shape)
    (seed,) = struct.unpack_from("<Q", raw, head + 4 * count)
    return x, seed
