"""Experiment orchestration: TOML configs, result rows, manifests and emitters.

An experiment attacks the first ``samples`` images of a dataset split with
every configured method and seed, then evaluates the adversarials on the
surrogate and on a target model.  Each (method, seed) cell is independent
and draws its randomness from per-sample streams, so the worker pool size
never changes a single output byte.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, attacks, data, flatness, models
from .errors import AlignmentError, ConfigError
from .seeding import derive_seed

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

CSV_COLUMNS = ("experiment_id", "method", "seed", "sample_id", "metric", "value", "units")
METRICS = ("asr", "budget", "flatness", "atg", "landscape", "quality")
AGGREGATE = -1  # sample_id of rows that summarize a whole cell
ALIGN_TOLERANCE = 0.15


@dataclass(frozen=True)
class ResultRow:
    experiment_id: str
    method: str
    seed: int
    sample_id: int
    metric: str
    value: float
    units: str = ""

    def sort_key(self):
        return (self.method, self.seed, self.sample_id)


def sort_rows(rows) -> list:
    """Order by (method, seed, sample_id); ties keep production order."""
    return sorted(rows, key=ResultRow.sort_key)


# -- emitters ---------------------------------------------------------------------

def format_value(v: float) -> str:
    v = float(v)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return f"{v:.9g}"


def csv_text(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in rows:
        writer.writerow([r.experiment_id, r.method, r.seed, r.sample_id, r.metric, format_value(r.value), r.units])
    return buf.getvalue()


def emit_csv(rows, path) -> str:
    """Write rows as CSV and return the file's sha256."""
    raw = csv_text(rows).encode("utf-8")
    Path(path).write_bytes(raw)
    return hashlib.sha256(raw).hexdigest()


def emit_json(rows, path) -> str:
    """Write rows as a JSON array (non-finite values become null); return sha256."""
    out = []
    for r in rows:
        d = asdict(r)
        v = float(format_value(r.value)) if math.isfinite(r.value) else None
        d["value"] = v
        out.append(d)
    raw = (json.dumps(out, indent=1) + "\n").encode("utf-8")
    Path(path).write_bytes(raw)
    return hashlib.sha256(raw).hexdigest()


def read_csv(path) -> list:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = tuple(next(reader))
        if header != CSV_COLUMNS:
            raise ConfigError(f"{path}: unexpected columns {header}")
        return [ResultRow(e, m, int(s), int(i), k, float(v), u) for e, m, s, i, k, v, u in reader]


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- manifest ---------------------------------------------------------------------

@dataclass
class RunManifest:
    config_digest: str
    version: str
    started: str
    finished: str = ""
    base_seed: int = 0
    outputs: dict = field(default_factory=dict)  # file name -> sha256

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=1, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))

    def verify(self, directory) -> list:
        """Names of outputs whose current digest differs from the recorded one."""
        return [name for name, digest in sorted(self.outputs.items())
                if not (Path(directory) / name).exists() or sha256_file(Path(directory) / name) != digest]


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


# -- configuration ----------------------------------------------------------------

_EXPERIMENT_KEYS = {"id", "methods", "seeds", "samples", "metrics", "out_dir", "align_tolerance"}
_DATA_KEYS = {"dir", "split", "generate", "n_train_per_class", "n_test_per_class", "noise_std", "seed"}
_MODEL_KEYS = {"checkpoint", "arch", "init_seed", "train"}
_TRAIN_KEYS = {f.name for f in fields(models.TrainConfig)}
_ATTACK_KEYS = {"eps", "eps_255", "iters"}
_ATTACK_OVERRIDES = {f.name for f in fields(attacks.AttackConfig)} - {"method", "eps", "iters", "seed"}
_FLATNESS_KEYS = {"xi_eps", "mc", "orders"}
_LANDSCAPE_KEYS = {"dirs", "range", "step"}
_DYNAMICS_KEYS = {"methods", "iters", "samples", "window"}
_SECTIONS = {"experiment", "data", "surrogate", "target", "attacks", "flatness", "landscape", "dynamics"}


def _check_keys(section: str, table: dict, allowed: set) -> None:
    unknown = set(table) - allowed
    if unknown:
        raise ConfigError(f"[{section}] has unknown keys {sorted(unknown)}")


@dataclass(frozen=True)
class ModelSource:
    """A checkpoint on disk, or an architecture to train inside the pipeline."""
    checkpoint: str | None = None
    arch: str | None = None
    init_seed: int = 0
    train: models.TrainConfig = models.TrainConfig()

    @classmethod
    def from_table(cls, name: str, table: dict, base: Path) -> "ModelSource":
        _check_keys(name, table, _MODEL_KEYS)
        train = dict(table.get("train", {}))
        _check_keys(f"{name}.train", train, _TRAIN_KEYS)
        ckpt = table.get("checkpoint")
        if (ckpt is None) == (table.get("arch") is None):
            raise ConfigError(f"[{name}] needs exactly one of 'checkpoint' or 'arch'")
        if ckpt is not None:
            ckpt = str((base / ckpt).resolve())
            if not Path(ckpt).exists():
                raise ConfigError(f"[{name}] checkpoint {ckpt} does not exist")
        elif table["arch"] not in models.ARCHITECTURES:
            raise ConfigError(f"[{name}] unknown arch {table['arch']!r}")
        return cls(ckpt, table.get("arch"), int(table.get("init_seed", 0)), models.TrainConfig(**train))


@dataclass(frozen=True)
class DataSource:
    dir: str | None = None
    split: str = "test"
    n_train_per_class: int = 300
    n_test_per_class: int = 100
    noise_std: float = 0.2
    seed: int = 0

    @classmethod
    def from_table(cls, table: dict, base: Path) -> "DataSource":
        _check_keys("data", table, _DATA_KEYS)
        table = dict(table)
        generate = table.pop("generate", "dir" not in table)
        if generate == ("dir" in table):
            raise ConfigError("[data] needs either 'dir' or 'generate = true'")
        if "dir" in table:
            table["dir"] = str((base / table["dir"]).resolve())
            if not Path(table["dir"]).is_dir():
                raise ConfigError(f"[data] directory {table['dir']} does not exist")
        return cls(**table)

    def load(self):
        """Return ``(train, eval_split)``."""
        if self.dir is not None:
            return data.load_split(self.dir, "train"), data.load_split(self.dir, self.split)
        return data.shapes16_splits(self.n_train_per_class, self.n_test_per_class, self.noise_std, self.seed)


@dataclass(frozen=True)
class ExperimentConfig:
    experiment_id: str
    methods: tuple
    seeds: tuple
    samples: int
    eps: float
    iters: int = 10
    metrics: tuple = ("asr", "budget")
    out_dir: str = "results"
    surrogate: ModelSource = ModelSource(arch="mlp")
    target: ModelSource = ModelSource(arch="cnn-a")
    data: DataSource = DataSource()
    overrides: dict = field(default_factory=dict)  # method -> AttackConfig overrides
    xi_eps: float = 2.0
    mc: int = 64
    orders: tuple = (0, 1)
    landscape_dirs: int = 20
    landscape_range: tuple = (-2.0, 2.0)
    landscape_step: float = 0.25
    align_tolerance: float = ALIGN_TOLERANCE
    dynamics: dict | None = None
    raw: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.methods:
            raise ConfigError("at least one attack method is required")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        for m in self.methods:
            if m not in attacks.METHODS:
                raise ConfigError(f"unknown attack method {m!r}")
        for m in self.metrics:
            if m not in METRICS:
                raise ConfigError(f"unknown metric {m!r}; choose from {METRICS}")
        if self.samples < 1:
            raise ConfigError("samples must be >= 1")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        for o in self.orders:
            if o not in (0, 1):
                raise ConfigError("flatness orders must be 0 or 1")
        for m in self.overrides:
            self.attack_config(m, self.seeds[0])

    def attack_config(self, method: str, seed: int) -> attacks.AttackConfig:
        return attacks.AttackConfig.preset(method, self.eps, self.iters, seed=seed, **self.overrides.get(method, {}))

    def digest(self) -> str:
        blob = json.dumps(self.raw or _jsonable(asdict(self)), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    @classmethod
    def from_toml(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            raw = tomllib.loads(path.read_text(encoding="utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(raw, path.parent)

    @classmethod
    def from_dict(cls, raw: dict, base=".") -> "ExperimentConfig":
        base = Path(base)
        _check_keys("top level", raw, _SECTIONS)
        exp = raw.get("experiment", {})
        _check_keys("experiment", exp, _EXPERIMENT_KEYS)
        atk = dict(raw.get("attacks", {}))
        per_method = {k: atk.pop(k) for k in list(atk) if isinstance(atk[k], dict)}
        _check_keys("attacks", atk, _ATTACK_KEYS)
        for m, table in per_method.items():
            if m not in attacks.METHODS:
                raise ConfigError(f"[attacks.{m}] is not a known method")
            _check_keys(f"attacks.{m}", table, _ATTACK_OVERRIDES)
        if "eps" in atk and "eps_255" in atk:
            raise ConfigError("[attacks] give eps or eps_255, not both")
        eps = float(atk["eps_255"]) / 255.0 if "eps_255" in atk else float(atk.get("eps", 16 / 255))
        flat = raw.get("flatness", {})
        _check_keys("flatness", flat, _FLATNESS_KEYS)
        land = raw.get("landscape", {})
        _check_keys("landscape", land, _LANDSCAPE_KEYS)
        dyn = raw.get("dynamics")
        if dyn is not None:
            _check_keys("dynamics", dyn, _DYNAMICS_KEYS)
        if "methods" not in exp:
            raise ConfigError("[experiment] must list methods")
        return cls(
            experiment_id=str(exp.get("id", "experiment")),
            methods=tuple(exp["methods"]),
            seeds=tuple(int(s) for s in exp.get("seeds", (0,))),
            samples=int(exp.get("samples", 100)),
            eps=eps,
            iters=int(atk.get("iters", 10)),
            metrics=tuple(exp.get("metrics", ("asr", "budget"))),
            out_dir=str((base / exp.get("out_dir", "results")).resolve()),
            surrogate=ModelSource.from_table("surrogate", raw.get("surrogate", {"arch": "mlp"}), base),
            target=ModelSource.from_table("target", raw.get("target", {"arch": "cnn-a"}), base),
            data=DataSource.from_table(raw.get("data", {"generate": True}), base),
            overrides=per_method,
            xi_eps=float(flat.get("xi_eps", 2.0)),
            mc=int(flat.get("mc", 64)),
            orders=tuple(flat.get("orders", (0, 1))),
            landscape_dirs=int(land.get("dirs", 20)),
            landscape_range=tuple(float(v) for v in land.get("range", (-2.0, 2.0))),
            landscape_step=float(land.get("step", 0.25)),
            align_tolerance=float(exp.get("align_tolerance", ALIGN_TOLERANCE)),
            dynamics=dict(dyn) if dyn is not None else None,
            raw=raw,
        )


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def worker_count() -> int:
    """Pool size from ``MEFLAB_THREADS`` (default 1)."""
    raw = os.environ.get("MEFLAB_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"MEFLAB_THREADS must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ConfigError("MEFLAB_THREADS must be >= 1")
    return n


def _map(fn, items):
    items = list(items)
    n = min(worker_count(), len(items))
    if n <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


# -- evaluation -------------------------------------------------------------------

def check_alignment(surrogate, target, dataset, tolerance: float = ALIGN_TOLERANCE) -> tuple:
    """Refuse pairs whose test accuracies differ by more than ``tolerance``."""
    acc_s, acc_t = models.accuracy(surrogate, dataset), models.accuracy(target, dataset)
    if abs(acc_s - acc_t) > tolerance:
        raise AlignmentError(
            f"surrogate accuracy {acc_s:.3f} and target accuracy {acc_t:.3f} differ by more than "
            f"{tolerance}; transfer numbers between such models mostly measure the weaker model")
    return acc_s, acc_t


def landscape_magnitudes(lo: float, hi: float, step: float) -> np.ndarray:
    n = int(round((hi - lo) / step))
    return np.round(lo + step * np.arange(n + 1), 12)


@dataclass(frozen=True)
class Cell:
    method: str
    seed: int


def evaluate_cell(cfg: ExperimentConfig, surrogate, target, x, y, cell: Cell) -> tuple:
    """Attack one (method, seed) cell; return ``(rows, x_adv)``."""
    acfg = cfg.attack_config(cell.method, cell.seed)
    ids = np.arange(len(x))
    res = attacks.run_attack(cell.method, surrogate, x, y, acfg, sample_ids=ids)
    adv = res.x_adv
    rows = []

    def add(sid, metric, value, units=""):
        rows.append(ResultRow(cfg.experiment_id, cell.method, cell.seed, int(sid), metric, float(value), units))

    add(AGGREGATE, "bp_count", res.bp_count, "gradients/sample")
    if "asr" in cfg.metrics:
        for name, model in (("surrogate", surrogate), ("target", target)):
            mask = flatness.clean_correct_mask(model, x, y)
            add(AGGREGATE, f"asr_{name}", flatness.asr(model, adv, y, mask), "fraction")
        fooled_s = surrogate.predict(adv) != y
        fooled_t = target.predict(adv) != y
        clean_t = flatness.clean_correct_mask(target, x, y)
    if "budget" in cfg.metrics:
        dist = np.abs(adv.astype(np.float64) - x.astype(np.float64)).reshape(len(x), -1).max(axis=1)
        in_range = ((adv >= 0) & (adv <= 1)).reshape(len(x), -1).all(axis=1)
    for i in ids:
        if "asr" in cfg.metrics:
            add(i, "fooled_surrogate", fooled_s[i], "bool")
            add(i, "fooled_target", fooled_t[i], "bool")
            add(i, "clean_correct_target", clean_t[i], "bool")
        if "budget" in cfg.metrics:
            add(i, "linf", dist[i], "pixel")
            add(i, "in_range", in_range[i], "bool")
        if "flatness" in cfg.metrics:
            xi = cfg.xi_eps * cfg.eps
            for order in cfg.orders:
                rng = derive_seed(cell.seed, int(i), f"flatness{order}")
                est = flatness.avg_flatness(surrogate, adv[i], y[i], xi, order, cfg.mc, rng)
                add(i, f"flatness{order}", est.value, "loss" if order == 0 else "grad-l2")
        if "atg" in cfg.metrics:
            rec = flatness.atg(surrogate, target, x[i:i + 1], adv[i:i + 1] - x[i:i + 1], y[i:i + 1])
            add(i, "atg", rec.atg[0], "nats")
        if "landscape" in cfg.metrics:
            mags = landscape_magnitudes(*cfg.landscape_range, cfg.landscape_step)
            rng = derive_seed(cell.seed, int(i), "landscape")
            prof = flatness.landscape_profile(surrogate, adv[i], y[i], mags, cfg.landscape_dirs, rng)
            for m, v in zip(mags, prof.mean):
                add(i, f"landscape@{m:+.4g}", v, "nats")
        if "quality" in cfg.metrics:
            add(i, "ssim", flatness.ssim(x[i], adv[i]), "")
            add(i, "psnr", flatness.psnr(x[i], adv[i]), "dB")
    return rows, adv


def rows_per_cell(cfg: ExperimentConfig) -> int:
    """Closed-form row count of one (method, seed) cell."""
    per_sample = 0
    aggregate = 1
    if "asr" in cfg.metrics:
        per_sample += 3
        aggregate += 2
    if "budget" in cfg.metrics:
        per_sample += 2
    if "flatness" in cfg.metrics:
        per_sample += len(cfg.orders)
    if "atg" in cfg.metrics:
        per_sample += 1
    if "landscape" in cfg.metrics:
        per_sample += len(landscape_magnitudes(*cfg.landscape_range, cfg.landscape_step))
    if "quality" in cfg.metrics:
        per_sample += 2
    return aggregate + per_sample * cfg.samples


def run_cells(cfg: ExperimentConfig, surrogate, target, dataset) -> tuple:
    """Run every (method, seed) cell on in-memory models; return ``(rows, advs)``."""
    check_alignment(surrogate, target, dataset, cfg.align_tolerance)
    if len(dataset) < cfg.samples:
        raise ConfigError(f"dataset has {len(dataset)} samples, config asks for {cfg.samples}")
    x, y = dataset.images[:cfg.samples], dataset.labels[:cfg.samples]
    cells = [Cell(m, s) for m in cfg.methods for s in cfg.seeds]
    results = _map(lambda c: evaluate_cell(cfg, surrogate, target, x, y, c), cells)
    rows = sort_rows(r for rs, _ in results for r in rs)
    advs = {c: adv for c, (_, adv) in zip(cells, results)}
    return rows, advs


def _materialize(src: ModelSource, name: str, train_set, test_set, out_dir: Path, outputs: dict):
    if src.checkpoint is not None:
        return models.load(src.checkpoint)
    model = models.build(models.make_spec(src.arch, input_shape=tuple(train_set.images.shape[1:]),
                                          num_classes=train_set.num_classes), src.init_seed)
    model, _ = models.train(model, train_set, test_set, src.train)
    path = out_dir / f"{name}.mefw"
    models.save(model, path)
    outputs[path.name] = sha256_file(path)
    return models.load(path)  # round-trip so in-memory and on-disk runs agree exactly


def run_experiment(cfg: ExperimentConfig) -> tuple:
    """Full pipeline: data, models, attacks, metrics, emitters, manifest (last)."""
    manifest = RunManifest(cfg.digest(), __version__, _now(), base_seed=min(cfg.seeds))
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_set, eval_set = cfg.data.load()
    surrogate = _materialize(cfg.surrogate, "surrogate", train_set, eval_set, out, manifest.outputs)
    target = _materialize(cfg.target, "target", train_set, eval_set, out, manifest.outputs)
    rows, advs = run_cells(cfg, surrogate, target, eval_set)
    manifest.outputs["results.csv"] = emit_csv(rows, out / "results.csv")
    manifest.outputs["results.json"] = emit_json(rows, out / "results.json")
    for cell, adv in advs.items():
        path = out / f"advs-{cell.method}-s{cell.seed}.mefb"
        attacks.save_advs(path, adv, cell.seed)
        manifest.outputs[path.name] = sha256_file(path)
    if cfg.dynamics is not None:
        d = cfg.dynamics
        n = int(d.get("samples", 50))
        dyn = dynamics_experiment(surrogate, target, tuple(d.get("methods", DYNAMICS_METHODS)),
                                  eval_set.images[:n], eval_set.labels[:n], iters=int(d.get("iters", 100)),
                                  seed=min(cfg.seeds), eps=cfg.eps, overrides=cfg.overrides,
                                  experiment_id=f"{cfg.experiment_id}-dynamics")
        manifest.outputs["dynamics.csv"] = emit_csv(dyn, out / "dynamics.csv")
    manifest.finished = _now()
    manifest.write(out / "manifest.json")
    return rows, manifest


# -- gradient-similarity dynamics ----------------------------------------------------

DYNAMICS_METHODS = ("rap", "fem", "pgn", "tpa")


def dynamics_experiment(surrogate, target, methods, x, y, iters: int = 100, seed: int = 0, eps: float = 0.1,
                        overrides=None, experiment_id: str = "dynamics") -> list:
    """Per-iteration update cosine similarity and running transfer ASR.

    Per method this yields ``len(x) * (iters - 1)`` per-sample rows named
    ``update_cos_sim@t`` (t >= 1, the first update has no predecessor), plus
    aggregate rows ``mean_update_cos_sim@t``, ``transfer_asr@t`` and the final
    budget check ``max_linf`` / ``in_range``.
    """
    overrides = overrides or {}
    x = np.asarray(x)
    y = np.asarray(y)
    mask = flatness.clean_correct_mask(target, x, y)

    def one(method):
        cfg = attacks.AttackConfig.preset(method, eps, iters, seed=seed, **overrides.get(method, {}))
        running = []
        res = attacks.run_attack(method, surrogate, x, y, cfg,
                                 callback=lambda t, adv: running.append(flatness.asr(target, adv, y, mask)))
        cos = res.telemetry["update_cos_sim"]
        dist = np.abs(res.x_adv.astype(np.float64) - x.astype(np.float64)).max()
        inside = bool(((res.x_adv >= 0) & (res.x_adv <= 1)).all())
        rows = [ResultRow(experiment_id, method, seed, AGGREGATE, "max_linf", float(dist), "pixel"),
                ResultRow(experiment_id, method, seed, AGGREGATE, "in_range", float(inside), "bool")]
        for t in range(iters):
            if t >= 1:
                rows.append(ResultRow(experiment_id, method, seed, AGGREGATE, f"mean_update_cos_sim@{t}",
                                      float(cos[t].mean()), "cosine"))
            rows.append(ResultRow(experiment_id, method, seed, AGGREGATE, f"transfer_asr@{t}", running[t], "fraction"))
        for b in range(len(x)):
            for t in range(1, iters):
                rows.append(ResultRow(experiment_id, method, seed, b, f"update_cos_sim@{t}", float(cos[t, b]), "cosine"))
        return rows

    return sort_rows(r for rows in _map(one, methods) for r in rows)


def post_convergence_similarity(rows, method: str, window: int = 30) -> float:
    """Mean per-sample update cosine over the last ``window`` iterations."""
    steps = {}
    for r in rows:
        if r.method == method and r.metric.startswith("update_cos_sim@"):
            steps.setdefault(int(r.metric.split("@")[1]), []).append(r.value)
    if not steps:
        return float("nan")
    last = sorted(steps)[-window:]
    return float(np.mean([v for t in last for v in steps[t]]))


def metric_values(rows, method: str, metric: str, seed=None) -> np.ndarray:
    return np.array([r.value for r in rows
                     if r.method == method and r.metric == metric and (seed is None or r.seed == seed)])

