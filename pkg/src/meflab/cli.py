"""Command-line entry point: ``meflab <subcommand> ...``."""
from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__, attacks, data, flatness, harness, models
from .errors import MeflabError
from .seeding import derive_seed

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

TELEMETRY_COLUMNS = ("sample_id", "t", "loss", "update_cos_sim", "bp_count")
FLATNESS_COLUMNS = ("sample_id", "mode", "order", "xi", "gamma", "mc", "value", "stderr")
LANDSCAPE_COLUMNS = ("sample_id", "direction", "magnitude", "delta")
ATG_COLUMNS = ("sample_id", "atg", "surrogate_loss", "target_loss", "surrogate_clean_loss", "target_clean_loss")


def write_table(path, columns, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([harness.format_value(v) if isinstance(v, (float, np.floating)) else v for v in row])


def eps_from_255(value: int) -> float:
    if value < 0:
        raise argparse.ArgumentTypeError("eps numerator must be non-negative")
    return value / 255.0


def _eval_pairs(args, count=None):
    ds = data.load_split(args.data, args.split)
    n = len(ds) if count is None else count
    if n > len(ds):
        raise MeflabError(f"{n} adversarials but the {args.split} split has {len(ds)} samples")
    return ds.images[:n], ds.labels[:n]


# -- subcommands ----------------------------------------------------------------------

def cmd_gen_data(args):
    train, test = data.shapes16_splits(args.n_train, args.n_test, args.noise, args.seed)
    data.save_split(train, args.out, "train")
    data.save_split(test, args.out, "test")
    print(f"wrote {len(train)} train / {len(test)} test images to {args.out}")


def cmd_train(args):
    raw = tomllib.loads(Path(args.config).read_text(encoding="utf-8")) if args.config else {}
    unknown = set(raw) - {"model", "train"}
    if unknown:
        raise MeflabError(f"{args.config}: unknown sections {sorted(unknown)}")
    mcfg = dict(raw.get("model", {}))
    bad = set(mcfg) - {"arch", "init_seed", "hidden"}
    if bad:
        raise MeflabError(f"[model] has unknown keys {sorted(bad)}")
    bad = set(raw.get("train", {})) - {f.name for f in fields(models.TrainConfig)}
    if bad:
        raise MeflabError(f"[train] has unknown keys {sorted(bad)}")
    tcfg = models.TrainConfig(**raw.get("train", {}))
    train_set, test_set = data.load_split(args.data, "train"), data.load_split(args.data, "test")
    hidden = tuple(mcfg["hidden"]) if "hidden" in mcfg else None
    spec = models.make_spec(mcfg.get("arch", "mlp"), tuple(train_set.images.shape[1:]),
                            max(train_set.num_classes, test_set.num_classes), hidden)
    model = models.build(spec, int(mcfg.get("init_seed", 0)))
    model, history = models.train(model, train_set, test_set, tcfg)
    models.save(model, args.out)
    for row in history:
        print(json.dumps(row))


def cmd_attack(args):
    model = models.load(args.model)
    x, y = _eval_pairs(args, args.limit)
    overrides = {}
    if args.samples is not None:
        overrides["samples"] = args.samples
    if args.variant:
        overrides["ncs_variant"] = args.variant
    if args.alpha is not None:
        overrides["alpha"] = args.alpha
    cfg = attacks.AttackConfig.preset(args.method, eps_from_255(args.eps), args.iters, seed=args.seed, **overrides)
    res = attacks.run_attack(args.method, model, x, y, cfg)
    attacks.save_advs(args.out, res.x_adv, args.seed)
    if args.telemetry:
        write_table(args.telemetry, TELEMETRY_COLUMNS, res.telemetry_rows())
    mask = flatness.clean_correct_mask(model, x, y)
    print(f"{args.method}: white-box ASR {flatness.asr(model, res.x_adv, y, mask):.4f}, "
          f"{res.bp_count:g} gradient evaluations per sample")


def cmd_transfer(args):
    sur, tgt = models.load(args.surrogate), models.load(args.target)
    adv, seed = attacks.load_advs(args.advs)
    x, y = _eval_pairs(args, len(adv))
    rows = []
    for name, model in (("surrogate", sur), ("target", tgt)):
        mask = flatness.clean_correct_mask(model, x, y)
        rate = flatness.asr(model, adv, y, mask)
        rows.append(harness.ResultRow(args.id, args.method, seed, harness.AGGREGATE, f"asr_{name}", rate, "fraction"))
        print(f"ASR on {name}: {rate:.4f}")
    fooled = tgt.predict(adv) != y
    rows += [harness.ResultRow(args.id, args.method, seed, i, "fooled_target", float(f), "bool")
             for i, f in enumerate(fooled)]
    if args.out:
        harness.emit_csv(harness.sort_rows(rows), args.out)


def cmd_flatness(args):
    model = models.load(args.model)
    adv, _ = attacks.load_advs(args.advs)
    _, y = _eval_pairs(args, len(adv))
    out = []
    for i in range(len(adv)):
        rng = derive_seed(args.seed, i, f"flatness-{args.mode}{args.order}")
        if args.mode == "avg":
            est = flatness.avg_flatness(model, adv[i], y[i], args.xi, args.order, args.mc, rng)
        elif args.mode == "worst":
            est = flatness.worst_flatness(model, adv[i], y[i], args.xi, args.order, args.mc, rng)
        else:
            if args.order != 0:
                raise MeflabError("worst-neighborhood average flatness is zeroth order only")
            est = flatness.wna_flatness(model, adv[i], y[i], args.gamma, args.xi, args.centers, args.mc, rng)
        out.append((i, est.mode, est.order, float(args.xi), float(args.gamma if args.mode == "wna" else 0.0),
                    args.mc, est.value, est.stderr))
    write_table(args.out, FLATNESS_COLUMNS, out)
    print(f"mean {args.mode} flatness (order {args.order}): {np.mean([r[6] for r in out]):.6g}")


def cmd_landscape(args):
    model = models.load(args.model)
    adv, _ = attacks.load_advs(args.advs)
    _, y = _eval_pairs(args, len(adv))
    mags = harness.landscape_magnitudes(args.range[0], args.range[1], args.step)
    out = []
    for i in range(len(adv)):
        prof = flatness.landscape_profile(model, adv[i], y[i], mags, args.dirs, derive_seed(args.seed, i, "landscape"))
        for m_idx, m in enumerate(mags):
            for d in range(args.dirs):
                out.append((i, d, float(m), float(prof.deltas[m_idx, d])))
    write_table(args.out, LANDSCAPE_COLUMNS, out)


def cmd_atg(args):
    sur, tgt = models.load(args.surrogate), models.load(args.target)
    adv, _ = attacks.load_advs(args.advs)
    x, y = _eval_pairs(args, len(adv))
    rec = flatness.atg(sur, tgt, x, adv - x, y)
    rows = zip(range(len(adv)), map(float, rec.atg), map(float, rec.surrogate_loss), map(float, rec.target_loss),
               map(float, rec.surrogate_clean_loss), map(float, rec.target_clean_loss))
    write_table(args.out, ATG_COLUMNS, rows)
    print(f"mean ATG {float(np.mean(rec.atg)):.6g}")


def cmd_dynamics(args):
    sur, tgt = models.load(args.surrogate), models.load(args.target)
    x, y = _eval_pairs(args, args.limit)
    methods = tuple(m.strip() for m in args.methods.split(","))
    rows = harness.dynamics_experiment(sur, tgt, methods, x, y, iters=args.iters, seed=args.seed,
                                       eps=eps_from_255(args.eps))
    harness.emit_csv(rows, args.out)
    for m in methods:
        sim = harness.post_convergence_similarity(rows, m, args.window)
        print(f"{m}: mean update cosine over the last {args.window} iterations {sim:.4f}")


def cmd_experiment(args):
    cfg = harness.ExperimentConfig.from_toml(args.config)
    if args.out_dir:
        cfg = harness.ExperimentConfig.from_dict({**cfg.raw, "experiment": {**cfg.raw["experiment"],
                                                                               "out_dir": str(Path(args.out_dir).resolve())}},
                                                 Path(args.config).parent)
    rows, manifest = harness.run_experiment(cfg)
    for m in cfg.methods:
        rates = harness.metric_values(rows, m, "asr_target")
        if len(rates):
            print(f"{m}: median target ASR {np.median(rates):.4f} over {len(rates)} seed(s)")
    if cfg.dynamics is not None:
        dyn = harness.read_csv(Path(cfg.out_dir) / "dynamics.csv")
        window = int(cfg.dynamics.get("window", 30))
        for m in cfg.dynamics.get("methods", harness.DYNAMICS_METHODS):
            sim = harness.post_convergence_similarity(dyn, m, window)
            print(f"{m}: mean update cosine over the last {window} iterations {sim:.4f}")
    print(f"wrote {len(manifest.outputs)} files to {cfg.out_dir}")


# -- parser -----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="meflab", description="Transfer-attack and loss-flatness lab.")
    p.add_argument("--version", action="version", version=f"meflab {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def data_args(sp, limit=False):
        sp.add_argument("--data", required=True, help="directory with IDX splits")
        sp.add_argument("--split", default="test")
        if limit:
            sp.add_argument("--limit", type=int, default=None, help="use the first LIMIT images")

    sp = sub.add_parser("gen-data", help="write the shapes16 dataset as IDX files")
    sp.add_argument("--out", required=True)
    sp.add_argument("--n-train", type=int, default=300, help="training images per class")
    sp.add_argument("--n-test", type=int, default=100, help="test images per class")
    sp.add_argument("--noise", type=float, default=0.2)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train a model and write a checkpoint")
    sp.add_argument("--config", help="TOML with [model] and [train] sections")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("attack", help="craft adversarials on one model")
    sp.add_argument("--model", required=True)
    data_args(sp, limit=True)
    sp.add_argument("--method", required=True, choices=attacks.METHODS)
    sp.add_argument("--eps", type=int, default=16, help="L-inf budget as a numerator over 255")
    sp.add_argument("--iters", type=int, default=10)
    sp.add_argument("--samples", type=int, default=None, help="neighbourhood samples per iteration")
    sp.add_argument("--alpha", type=float, default=None, help="step size (default eps / iters)")
    sp.add_argument("--variant", choices=attacks.NCS_VARIANTS, default=None)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.add_argument("--telemetry")
    sp.set_defaults(func=cmd_attack)

    sp = sub.add_parser("transfer", help="evaluate saved adversarials on surrogate and target")
    sp.add_argument("--surrogate", required=True)
    sp.add_argument("--target", required=True)
    sp.add_argument("--advs", required=True)
    data_args(sp)
    sp.add_argument("--method", default="unknown", help="label for the result rows")
    sp.add_argument("--id", default="transfer")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_transfer)

    sp = sub.add_parser("flatness", help="Monte Carlo flatness of saved adversarials")
    sp.add_argument("--model", required=True)
    sp.add_argument("--advs", required=True)
    data_args(sp)
    sp.add_argument("--mode", choices=("avg", "worst", "wna"), default="avg")
    sp.add_argument("--order", type=int, choices=(0, 1), default=0)
    sp.add_argument("--xi", type=float, required=True)
    sp.add_argument("--gamma", type=float, default=0.0)
    sp.add_argument("--mc", type=int, default=64)
    sp.add_argument("--centers", type=int, default=16)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_flatness)

    sp = sub.add_parser("landscape", help="loss deltas along random directions")
    sp.add_argument("--model", required=True)
    sp.add_argument("--advs", required=True)
    data_args(sp)
    sp.add_argument("--dirs", type=int, default=20)
    sp.add_argument("--range", type=float, nargs=2, default=(-2.0, 2.0), metavar=("LO", "HI"))
    sp.add_argument("--step", type=float, default=0.25)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_landscape)

    sp = sub.add_parser("atg", help="transferability gap of saved adversarials")
    sp.add_argument("--surrogate", required=True)
    sp.add_argument("--target", required=True)
    sp.add_argument("--advs", required=True)
    data_args(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_atg)

    sp = sub.add_parser("dynamics", help="update-similarity dynamics over many iterations")
    sp.add_argument("--surrogate", required=True)
    sp.add_argument("--target", required=True)
    data_args(sp, limit=True)
    sp.add_argument("--methods", default=",".join(harness.DYNAMICS_METHODS))
    sp.add_argument("--iters", type=int, default=100)
    sp.add_argument("--eps", type=int, default=16, help="L-inf budget as a numerator over 255")
    sp.add_argument("--window", type=int, default=30)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_dynamics)

    sp = sub.add_parser("experiment", help="full pipeline from one TOML file")
    sp.add_argument("--config", required=True)
    sp.add_argument("--out-dir", help="override [experiment] out_dir")
    sp.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (MeflabError, OSError) as exc:
        print(f"meflab: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
