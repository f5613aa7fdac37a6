"""Command-line entry point: ``pcdistill <command> [flags]``.

Commands: gen-data, train-teacher, distill, ablate, report, eval.
Flags may also be given in a ``--config`` file (``[train]`` section, keys named
like the flags with underscores); flags on the command line win.
"""
from __future__ import annotations

import argparse
import configparser
import logging
import sys
from pathlib import Path

from . import data as dataio
from . import experiments, models
from .losses import FADAxis, FADVariant, LossWeights, simplex_grid
from .training import TrainConfig, TrainingError, distill, evaluate, train_teacher

logger = logging.getLogger("pcdistill")

EXIT_OK, EXIT_RUN_FAILED, EXIT_USAGE = 0, 1, 2

TRAIN_DEFAULTS = {
    "epochs": 200,
    "batch_size": 32,
    "lr": 0.01,
    "temperature": 4.0,
    "alpha": 1 / 3,
    "beta": 1 / 3,
    "gamma": 1 / 3,
    "variant": "mean",
    "fad_axis": "dims",
    "seeds": "0",
    "schedule": "cosine",
    "student_config": "student",
    "teacher_config": "teacher",
}


class CLIError(Exception):
    pass


# -- helpers -----------------------------------------------------------------

def _int_list(text: str) -> list:
    try:
        out = [int(t) for t in str(text).split(",") if t.strip()]
    except ValueError:
        raise CLIError(f"expected comma-separated integers, got {text!r}") from None
    if not out:
        raise CLIError("seed list is empty")
    return out


def _resolve(args, keys) -> None:
    """Fill unset flags from ``--config`` then from the built-in defaults."""
    file_vals = {}
    if getattr(args, "config", None):
        cp = configparser.ConfigParser()
        if not cp.read(args.config):
            raise CLIError(f"cannot read config file {args.config}")
        if cp.has_section("train"):
            file_vals = dict(cp["train"])
    for key in keys:
        if getattr(args, key, None) is None:
            raw = file_vals.get(key, TRAIN_DEFAULTS.get(key))
            default = TRAIN_DEFAULTS.get(key)
            if raw is not None and default is not None and not isinstance(default, str):
                raw = type(default)(raw)
            setattr(args, key, raw)


def _weights(args) -> LossWeights:
    try:
        return LossWeights(args.alpha, args.beta, args.gamma)
    except ValueError as exc:
        raise CLIError(str(exc)) from None


def _train_config(args, seed: int = 0) -> TrainConfig:
    return TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, schedule=args.schedule,
        seed=seed, weights=_weights(args), variant=FADVariant(args.variant.split(",")[0]),
        fad_axis=FADAxis(args.fad_axis), temperature=args.temperature,
        tau_squared=getattr(args, "kd_tau2", False),
    )


def _guard(paths, force: bool) -> None:
    existing = [str(p) for p in paths if Path(p).exists()]
    if existing and not force:
        raise CLIError("refusing to overwrite without --force: " + ", ".join(existing))


def _load_dataset(path):
    try:
        return dataio.load_dataset(path)
    except (OSError, ValueError) as exc:
        raise CLIError(f"cannot load dataset {path}: {exc}") from None


def _load_teacher(path):
    try:
        return models.load_checkpoint(path)
    except (OSError, ValueError) as exc:
        raise CLIError(f"cannot load teacher checkpoint {path}: {exc}") from None


def _load_config(name, n_classes=None):
    try:
        return models.load_config(name, n_classes)
    except (OSError, ValueError) as exc:
        raise CLIError(str(exc)) from None


def _write(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(payload, bytes):
        path.write_bytes(payload)
    else:
        path.write_text(payload)


# -- commands ----------------------------------------------------------------

def cmd_gen_data(args) -> int:
    out = Path(args.out)
    _guard([out / "manifest.txt", out / "train.pcd", out / "test.pcd"], args.force)
    errors = []
    try:
        if args.mesh_dir:
            ds, errors = dataio.load_mesh_dir(args.mesh_dir, args.points, args.seed)
        else:
            families = [c.strip() for c in args.classes.split(",") if c.strip()]
            ds = dataio.generate_synthetic(families, args.per_class, args.points, args.seed, args.jitter)
    except (OSError, ValueError) as exc:
        raise CLIError(str(exc)) from None
    try:
        dataio.save_dataset(ds, out)
    except OSError as exc:
        raise CLIError(f"cannot write dataset to {out}: {exc}") from None
    for name, message in errors:
        print(f"skipped {name}: {message}", file=sys.stderr)
    print(f"{'class':<12} {'train':>6} {'test':>6}")
    for name, tr, te in zip(ds.class_names, ds.counts("train"), ds.counts("test")):
        print(f"{name:<12} {tr:>6} {te:>6}")
    print(f"{'total':<12} {len(ds.train):>6} {len(ds.test):>6}")
    return EXIT_OK


def cmd_train_teacher(args) -> int:
    _resolve(args, ["epochs", "batch_size", "lr", "schedule", "teacher_config", "seeds"])
    args.alpha, args.beta, args.gamma = 0.0, 0.0, 1.0
    args.temperature, args.variant, args.fad_axis = 4.0, "mean", "dims"
    out = Path(args.out)
    _guard([out / "teacher.fadc", out / "teacher.csv"], args.force)
    ds = _load_dataset(args.dataset)
    encoder, head = _load_config(args.teacher_config, ds.n_classes)
    seed = _int_list(args.seeds)[0]
    model, record = train_teacher(encoder, head, _train_config(args, seed), ds)
    _write(out / "teacher.fadc", models.checkpoint_bytes(model))
    _write(out / "teacher.csv", record.to_csv())
    print(f"teacher best test accuracy {record.best_test_acc:.4f} (epoch {record.best_epoch})")
    return EXIT_OK


def _sweep(args, jobs, out: Path, extra_files=()) -> tuple:
    ds = _load_dataset(args.dataset)
    teacher = _load_teacher(args.teacher_ckpt)
    encoder, head = _load_config(args.student_config, ds.n_classes)
    if teacher.head.n_classes != ds.n_classes:
        raise CLIError(f"teacher has {teacher.head.n_classes} classes, dataset has {ds.n_classes}")
    targets = [out / "summary.csv", *extra_files]
    for job in jobs:
        targets += [out / "runs" / f"{job.name}.csv", out / "runs" / f"{job.name}.fadc"]
    _guard(targets, args.force)
    base = _train_config(args)
    results = experiments.run_jobs(jobs, encoder, head, teacher, base, ds, adapter=args.adapter)
    for r in results:
        if r.record is not None:
            _write(out / "runs" / f"{r.job.name}.csv", r.record.to_csv())
            _write(out / "runs" / f"{r.job.name}.fadc", models.checkpoint_bytes(r.student))
    _write(out / "summary.csv", experiments.summary_csv(results))
    failed = [r for r in results if r.error]
    for r in failed:
        print(f"run {r.job.name} failed: {r.error}", file=sys.stderr)
    return results, failed


def cmd_distill(args) -> int:
    keys = ["epochs", "batch_size", "lr", "schedule", "temperature", "alpha", "beta", "gamma",
            "variant", "fad_axis", "seeds", "student_config"]
    _resolve(args, keys)
    try:
        variants = [FADVariant(v.strip()) for v in args.variant.split(",")]
    except ValueError:
        raise CLIError(f"--variant must be a list of max/min/mean, got {args.variant!r}") from None
    seeds = _int_list(args.seeds)
    grid = experiments_weights(args)
    jobs = [experiments.Job(v.value.upper(), w, v, s) for v in variants for w in grid for s in seeds]
    results, failed = _sweep(args, jobs, Path(args.out))
    print(f"{'run':<48} {'acc':>7} {'teacher':>8} {'gap':>7}")
    for r in results:
        if r.record:
            rec = r.record
            print(f"{r.job.name:<48} {rec.best_test_acc:>7.4f} {rec.teacher_test_acc:>8.4f} {rec.transfer_gap:>7.4f}")
    return EXIT_RUN_FAILED if failed else EXIT_OK


def experiments_weights(args) -> list:
    if getattr(args, "weight_grid", None):
        return simplex_grid(args.weight_grid)
    return [_weights(args)]


def cmd_ablate(args) -> int:
    keys = ["epochs", "batch_size", "lr", "schedule", "temperature", "alpha", "beta", "gamma",
            "fad_axis", "seeds", "student_config"]
    _resolve(args, keys)
    args.variant = "mean"
    seeds = _int_list(args.seeds)
    if len(seeds) < 2:
        print("warning: fewer than 2 seeds, standard deviations are undefined", file=sys.stderr)
    out = Path(args.out)
    jobs = experiments.ablation_jobs(_weights(args), seeds)
    results, failed = _sweep(args, jobs, out, [out / "ablation.csv", out / "ablation_curves.csv"])
    teacher_acc = next((r.record.teacher_test_acc for r in results if r.record), float("nan"))
    summaries = experiments.summarize(results)
    table = experiments.ablation_table(summaries, teacher_acc)
    _write(out / "ablation.csv", table)
    _write(out / "ablation_curves.csv", experiments.curves_csv(results))
    print(f"{'model':<8} {'loss':<8} {'acc':>8} {'std':>8} {'gap':>8}")
    print(f"{'Teacher':<8} {'CE':<8} {teacher_acc:>8.4f}")
    for s in summaries:
        print(f"{'Student':<8} {s.method:<8} {s.mean:>8.4f} {s.std:>8.4f} {s.mean_gap:>8.4f}")
    return EXIT_RUN_FAILED if failed else EXIT_OK


def cmd_report(args) -> int:
    t_enc, t_head = _load_config(args.teacher_config, args.classes)
    s_enc, s_head = _load_config(args.student_config, args.classes)
    t_params, t_flops = models.count_params_flops(t_enc, t_head, args.points)
    s_params, s_flops = models.count_params_flops(s_enc, s_head, args.points)
    print(f"points per sample: {args.points}, classes: {args.classes}")
    print(f"{'model':<8} {'params':>12} {'FLOPs':>16}")
    print(f"{'teacher':<8} {t_params:>12d} {t_flops:>16d}")
    print(f"{'student':<8} {s_params:>12d} {s_flops:>16d}")
    print(f"parameter ratio: {t_params / s_params:.2f}x")
    print(f"FLOP ratio: {t_flops / s_flops:.2f}x")
    return EXIT_OK


def cmd_eval(args) -> int:
    ds = _load_dataset(args.dataset)
    model = _load_teacher(args.ckpt)
    split = getattr(ds, args.split)
    if model.head.n_classes != ds.n_classes:
        raise CLIError(f"checkpoint has {model.head.n_classes} classes, dataset has {ds.n_classes}")
    try:
        res = evaluate(model, split)
    except ValueError as exc:
        raise CLIError(str(exc)) from None
    print(f"accuracy {res.accuracy:.4f} on {len(split)} {args.split} samples")
    for name, acc in zip(ds.class_names, res.per_class):
        print(f"  {name:<12} {acc:.4f}")
    print("confusion (rows true, cols predicted):")
    for row in res.confusion:
        print("  " + " ".join(f"{v:>5d}" for v in row))
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def _add_train_flags(p, with_weights: bool = True) -> None:
    p.add_argument("--dataset", required=True, help="dataset directory written by gen-data")
    p.add_argument("--config", help="INI file with a [train] section of flag defaults")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--schedule", choices=("cosine", "constant"))
    p.add_argument("--seeds", help="comma-separated seeds")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    if with_weights:
        p.add_argument("--teacher-ckpt", required=True)
        p.add_argument("--student-config", help="built-in name (student/teacher) or INI path")
        p.add_argument("--alpha", type=float)
        p.add_argument("--beta", type=float)
        p.add_argument("--gamma", type=float)
        p.add_argument("--temperature", type=float)
        p.add_argument("--kd-tau2", action="store_true", help="multiply the KD loss by tau^2")
        p.add_argument("--fad-axis", choices=("dims", "points"))
        p.add_argument("--adapter", action="store_true", help="learned student->teacher feature adapter")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pcdistill", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset or sample OFF meshes")
    p.add_argument("--classes", default="sphere,cube,cylinder,torus")
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--points", type=int, default=1024)
    p.add_argument("--jitter", type=float, default=0.0, help="Gaussian point noise (synthetic only)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mesh-dir", help="directory of .off files instead of synthetic shapes")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-teacher", help="cross-entropy training of the teacher")
    _add_train_flags(p, with_weights=False)
    p.add_argument("--teacher-config", help="built-in name or INI path")
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("distill", help="distill a student for each (variant, weights, seed)")
    _add_train_flags(p)
    p.add_argument("--variant", help="comma-separated subset of max,min,mean")
    p.add_argument("--weight-grid", type=int, help="sweep the weight simplex in steps of 1/K")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("ablate", help="Norm KD vs FAD MIN/MAX/MEAN over a seed list")
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="parameter and FLOP accounting")
    p.add_argument("--teacher-config", default="teacher")
    p.add_argument("--student-config", default="student")
    p.add_argument("--points", type=int, default=1024)
    p.add_argument("--classes", type=int, default=40)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("eval", help="accuracy and confusion matrix of a checkpoint")
    p.add_argument("--dataset", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (CLIError, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
