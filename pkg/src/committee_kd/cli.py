"""Experiment harness: train/distill across seeds, aggregate reports, and dump
importance scores.

    committee-kd run --dataset synthetic --method qa --teachers mlp-l,text \
        --alpha 1.0 --seeds 0,1,2,3,4 --out runs/
    committee-kd report --out runs/
    committee-kd importance-dump --teachers mlp-l,text --threshold 0.6 --out runs/imp

Exit codes: 0 success, 1 configuration error, 2 numerical divergence. All
artifacts land under --out and are byte-identical across re-runs with equal
flags (timings go to a plain-text sidecar, not the JSON/CSV artifacts).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .committee import teacher_importance, write_importance_csv
from .data import RatingDataset, generate_synthetic, load_csv
from .hashing import derive_seed, fnv1a_64
from .models import MENU, load_checkpoint, menu_spec, save_checkpoint
from .training import (CommitteeConfig, DivergenceError, RunReport, TeacherHandle,
                       TrainParams, baseline_fd, baseline_ld, baseline_mt, evaluate,
                       run_distillation, supervised_run, train_teacher, write_epoch_csv)

METHODS = ("qa", "ld", "fd", "mt", "none")


class ConfigError(ValueError):
    """Bad flags or an invalid experiment configuration (exit code 1)."""


@dataclass
class ExperimentConfig:
    """Fully parsed command; round-trips exactly through to_dict/from_dict."""

    command: str
    dataset: str = "synthetic"
    method: str = "qa"
    teachers: list[str] = field(default_factory=list)
    alpha: float = 1.0
    threshold: float | None = None
    seeds: list[int] = field(default_factory=lambda: [0])
    out: str = "runs"
    d_emb: int = 16
    d_m: int = 32
    epochs: int = 3
    lr: float = 1e-3
    augmenter_lr: float | None = None
    steps_per_epoch: int = 150
    batch_size: int = 256
    student: str = "mlp-s"
    embed_dim: int = 16
    teacher_epochs: int | None = None
    n_users: int = 1000
    n_items: int = 500
    latent_dim: int = 8
    noise_sd: float = 0.3
    n_ratings: int = 50000
    data_seed: int = 0
    limit: int = 64
    paths: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return cls(**d)


def _parse_int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip() != ""]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None


def _parse_name_list(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); config errors are exit 1
        raise ConfigError(message)


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dataset", default="synthetic",
                   help="'synthetic' or a path to a user_id,item_id,rating[,title] CSV")
    p.add_argument("--method", default="qa", choices=METHODS)
    p.add_argument("--teachers", default="mlp-l,text",
                   help=f"comma list from {sorted(MENU)} (ignored for method=none)")
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--seeds", default="0", help="comma list of run seeds")
    p.add_argument("--out", default="runs")
    p.add_argument("--d-emb", type=int, default=16, dest="d_emb")
    p.add_argument("--d-m", type=int, default=32, dest="d_m")
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--augmenter-lr", type=float, default=None, dest="augmenter_lr",
                   help="regularizer-phase learning rate (default: same as --lr)")
    p.add_argument("--steps-per-epoch", type=int, default=150, dest="steps_per_epoch")
    p.add_argument("--batch-size", type=int, default=256, dest="batch_size")
    p.add_argument("--student", default="mlp-s", choices=sorted(MENU))
    p.add_argument("--embed-dim", type=int, default=16, dest="embed_dim")
    p.add_argument("--teacher-epochs", type=int, default=None, dest="teacher_epochs")
    p.add_argument("--n-users", type=int, default=1000, dest="n_users")
    p.add_argument("--n-items", type=int, default=500, dest="n_items")
    p.add_argument("--latent-dim", type=int, default=8, dest="latent_dim")
    p.add_argument("--noise-sd", type=float, default=0.3, dest="noise_sd")
    p.add_argument("--n-ratings", type=int, default=50000, dest="n_ratings")
    p.add_argument("--data-seed", type=int, default=0, dest="data_seed")


def parse_args(argv: list[str] | None = None) -> ExperimentConfig:
    parser = _Parser(prog="committee-kd",
                     description="Committee knowledge distillation experiment harness")
    sub = parser.add_subparsers(dest="command")
    run_p = sub.add_parser("run", help="train and evaluate a method across seeds")
    _add_run_flags(run_p)
    rep_p = sub.add_parser("report", help="aggregate run reports into a comparison table")
    rep_p.add_argument("--out", default="runs")
    rep_p.add_argument("paths", nargs="*", help="extra report.json files or directories")
    dump_p = sub.add_parser("importance-dump",
                            help="train a committee run and dump per-example importance scores")
    _add_run_flags(dump_p)
    dump_p.add_argument("--limit", type=int, default=64,
                        help="number of held-out examples to score")
    args = parser.parse_args(argv)
    if args.command is None:
        raise ConfigError("missing command: expected run, report, or importance-dump")
    d = vars(args).copy()
    if args.command in ("run", "importance-dump"):
        d["seeds"] = _parse_int_list(args.seeds)
        d["teachers"] = _parse_name_list(args.teachers)
    config = ExperimentConfig(**{k: v for k, v in d.items()
                                 if k in ExperimentConfig.__dataclass_fields__})
    _validate(config)
    return config


def _validate(config: ExperimentConfig) -> None:
    if config.command in ("run", "importance-dump"):
        if config.method not in METHODS:
            raise ConfigError(f"unknown method {config.method!r}")
        for name in config.teachers:
            if name not in MENU:
                raise ConfigError(f"unknown teacher {name!r}; expected one of {sorted(MENU)}")
        if config.method in ("ld", "fd") and len(config.teachers) != 1:
            raise ConfigError(f"method {config.method} takes exactly one teacher, "
                              f"got {len(config.teachers)}")
        if config.method in ("mt", "qa") and not config.teachers:
            raise ConfigError(f"method {config.method} needs at least one teacher")
        if config.method == "none":
            config.teachers = []
        if not config.seeds:
            raise ConfigError("need at least one seed")
        if config.alpha < 0:
            raise ConfigError(f"alpha must be non-negative, got {config.alpha}")
        if config.threshold is not None and not (0.0 < config.threshold < 1.0):
            raise ConfigError(f"threshold must lie strictly in (0, 1), got {config.threshold}")
        if config.augmenter_lr is not None and config.augmenter_lr <= 0:
            raise ConfigError(f"augmenter-lr must be positive, got {config.augmenter_lr}")
        if config.command == "importance-dump":
            if config.method != "qa":
                raise ConfigError("importance-dump requires method qa")
            if config.alpha == 0:
                raise ConfigError("importance-dump needs alpha > 0 so augmenters are trained")


# ---------------------------------------------------------------------------
# metrics


def improvement_percent(m_student_base: float, m_student_distilled: float,
                        m_best_teacher: float, direction: str = "lower") -> float:
    """Percentage of the baseline-to-best-teacher gap closed by distillation.

    (base - distilled) / (base - teacher) * 100; the ratio is the same for
    higher-better metrics since both differences flip sign. Values above 100
    mean the distilled student surpassed the best teacher.
    """
    if direction not in ("lower", "higher"):
        raise ValueError(f"direction must be 'lower' or 'higher', got {direction!r}")
    gap = m_student_base - m_best_teacher
    if gap == 0:
        raise ValueError("improvement undefined: baseline student metric equals "
                         "best-teacher metric (zero gap)")
    return (m_student_base - m_student_distilled) / gap * 100.0


# ---------------------------------------------------------------------------
# run command


def _load_dataset(config: ExperimentConfig) -> tuple[RatingDataset, dict]:
    if config.dataset == "synthetic":
        data = generate_synthetic(config.n_users, config.n_items, config.latent_dim,
                                  config.noise_sd, config.n_ratings, seed=config.data_seed)
        fingerprint = {"kind": "synthetic", "n_users": config.n_users,
                       "n_items": config.n_items, "latent_dim": config.latent_dim,
                       "noise_sd": config.noise_sd, "n_ratings": config.n_ratings,
                       "seed": config.data_seed}
    else:
        if not os.path.exists(config.dataset):
            raise ConfigError(f"dataset file not found: {config.dataset}")
        data = load_csv(config.dataset, split_seed=config.data_seed)
        with open(config.dataset, "rb") as f:
            digest = fnv1a_64(f.read())
        fingerprint = {"kind": "csv", "path": config.dataset, "content_hash": digest,
                       "split_seed": config.data_seed}
    return data, fingerprint


def _teacher_train_params(config: ExperimentConfig) -> TrainParams:
    epochs = config.teacher_epochs if config.teacher_epochs is not None else config.epochs
    return TrainParams(epochs=epochs, steps_per_epoch=config.steps_per_epoch,
                       batch_size=config.batch_size, lr=config.lr)


def _pretrained_teachers(config: ExperimentConfig, data: RatingDataset,
                         fingerprint: dict) -> list[TeacherHandle]:
    """Train (or load cached) teachers; one checkpoint per distinct setup."""
    cache_dir = os.path.join(config.out, "teachers")
    os.makedirs(cache_dir, exist_ok=True)
    train = _teacher_train_params(config)
    handles = []
    for name in config.teachers:
        spec = menu_spec(name, role="teacher",
                         seed=derive_seed(config.data_seed, "teacher-init", name),
                         embed_dim=config.embed_dim)
        batch_seed = derive_seed(config.data_seed, "teacher-batches", name)
        key = fnv1a_64(json.dumps(
            {"spec": spec.to_dict(), "train": asdict(train), "batch_seed": batch_seed,
             "data": fingerprint}, sort_keys=True))
        path = os.path.join(cache_dir, f"{name}-{key:016x}.ckpt")
        if os.path.exists(path):
            model = load_checkpoint(path)
        else:
            model = train_teacher(spec, data, train, seed=batch_seed)
            save_checkpoint(model, path)
        handles.append(TeacherHandle(model=model, name=name))
    return handles


def _run_tag(config: ExperimentConfig) -> str:
    tag = config.method
    if config.teachers:
        tag += "-" + "+".join(config.teachers)
    if config.threshold is not None:
        tag += f"-thr{config.threshold:g}"
    return tag


def _execute_seed(config: ExperimentConfig, data: RatingDataset,
                  teachers: list[TeacherHandle], seed: int) -> RunReport:
    student_spec = menu_spec(config.student, role="student",
                             seed=derive_seed(seed, "student-init"),
                             embed_dim=config.embed_dim)
    train = TrainParams(epochs=config.epochs, steps_per_epoch=config.steps_per_epoch,
                        batch_size=config.batch_size, lr=config.lr)
    if config.method == "none":
        return supervised_run(student_spec, data, train, seed=seed)
    if config.method == "ld":
        return baseline_ld(student_spec, teachers[0], data, train, seed=seed,
                           alpha=config.alpha)
    if config.method == "fd":
        return baseline_fd(student_spec, teachers[0], data, train, seed=seed,
                           alpha=config.alpha)
    if config.method == "mt":
        return baseline_mt(student_spec, teachers, data, train, seed=seed,
                           alpha=config.alpha)
    committee = CommitteeConfig(student=student_spec, teachers=teachers,
                                alpha=config.alpha, threshold=config.threshold,
                                train=train, d_emb=config.d_emb, d_m=config.d_m,
                                seed=seed, augmenter_lr=config.augmenter_lr)
    return run_distillation(committee, data)


def _write_aggregate_csv(path: str, reports: list[RunReport]) -> None:
    lines = ["seed,final_metric,invoked_passes,skipped_passes,distill_steps"]
    for r in reports:
        lines.append(f"{r.seed},{r.final_metric!r},{r.teacher_passes['invoked']},"
                     f"{r.teacher_passes['skipped']},{r.distill_steps}")
    mean = float(np.mean([r.final_metric for r in reports]))
    lines.append(f"mean,{mean!r},,,")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def cmd_run(config: ExperimentConfig) -> list[RunReport]:
    data, fingerprint = _load_dataset(config)
    teachers = _pretrained_teachers(config, data, fingerprint)
    teacher_metrics = {t.name: evaluate(t.model, data) for t in teachers}
    tag = _run_tag(config)
    run_dir = os.path.join(config.out, tag)
    os.makedirs(run_dir, exist_ok=True)
    with open(os.path.join(run_dir, "config.json"), "w") as f:
        json.dump(config.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    reports = []
    timings = []
    for seed in config.seeds:
        report = _execute_seed(config, data, teachers, seed)
        report.extra["teachers"] = [t.name for t in teachers]
        report.extra["teacher_metrics"] = teacher_metrics
        report.extra["student"] = config.student
        report.extra["run_tag"] = tag
        seed_dir = os.path.join(run_dir, f"seed{seed}")
        os.makedirs(seed_dir, exist_ok=True)
        report.save(os.path.join(seed_dir, "report.json"))
        write_epoch_csv(report, os.path.join(seed_dir, "epochs.csv"))
        timings.append(f"seed {seed}: {report.wall_clock_s:.2f} s")
        print(f"[{tag}] seed {seed}: test MSE {report.final_metric:.4f}")
        reports.append(report)
    _write_aggregate_csv(os.path.join(run_dir, "aggregate.csv"), reports)
    with open(os.path.join(run_dir, "timings.txt"), "w") as f:
        f.write("\n".join(timings) + "\n")
    mean = float(np.mean([r.final_metric for r in reports]))
    print(f"[{tag}] mean test MSE over {len(reports)} seed(s): {mean:.4f}")
    return reports


# ---------------------------------------------------------------------------
# report command


def _collect_reports(config: ExperimentConfig) -> list[RunReport]:
    paths = []
    roots = list(config.paths) or [config.out]
    for root in roots:
        if os.path.isfile(root):
            paths.append(root)
        elif os.path.isdir(root):
            for dirpath, _, files in os.walk(root):
                for fn in sorted(files):
                    if fn == "report.json":
                        paths.append(os.path.join(dirpath, fn))
        else:
            raise ConfigError(f"no such report file or directory: {root}")
    reports = [RunReport.load(p) for p in sorted(set(paths))]
    if not reports:
        raise ConfigError(f"no report.json files found under {roots}")
    return reports


def _fmt(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def render_table(rows: list[dict], columns: list[str]) -> str:
    """Aligned text table; None cells render as NA."""
    cells = [[_fmt(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) if cells else len(c)
              for i, c in enumerate(columns)]
    def line(parts):
        return "  ".join(p.ljust(w) for p, w in zip(parts, widths)).rstrip()
    out = [line(columns), line(["-" * w for w in widths])]
    out += [line(row) for row in cells]
    return "\n".join(out)


def cmd_report(config: ExperimentConfig) -> str:
    reports = _collect_reports(config)
    groups: dict[str, list[RunReport]] = {}
    for r in reports:
        tag = r.extra.get("run_tag") or r.method
        groups.setdefault(tag, []).append(r)
    baseline = None
    if "none" in groups:
        baseline = float(np.mean([r.final_metric for r in groups["none"]]))
    teacher_metrics: dict[str, float] = {}
    for r in reports:
        teacher_metrics.update(r.extra.get("teacher_metrics", {}))
    best_teacher = min(teacher_metrics.values()) if teacher_metrics else None
    rows = []
    for tag in sorted(groups):
        rs = groups[tag]
        mean = float(np.mean([r.final_metric for r in rs]))
        improvement = None
        if baseline is not None and best_teacher is not None and baseline != best_teacher:
            improvement = improvement_percent(baseline, mean, best_teacher)
        rows.append({
            "method": rs[0].method,
            "teachers": "+".join(rs[0].extra.get("teachers", [])) or None,
            "seeds": len(rs),
            "mean_mse": mean,
            "improvement_pct": improvement,
        })
    columns = ["method", "teachers", "seeds", "mean_mse", "improvement_pct"]
    table = render_table(rows, columns)
    os.makedirs(config.out, exist_ok=True)
    csv_path = os.path.join(config.out, "report.csv")
    with open(csv_path, "w") as f:
        f.write(",".join(columns) + "\n")
        for r in rows:
            f.write(",".join(_fmt(r.get(c)) for c in columns) + "\n")
    print(table)
    return table


# ---------------------------------------------------------------------------
# importance-dump command


def cmd_importance_dump(config: ExperimentConfig) -> str:
    data, fingerprint = _load_dataset(config)
    teachers = _pretrained_teachers(config, data, fingerprint)
    seed = config.seeds[0]
    report = _execute_seed(config, data, teachers, seed)
    student = report.student
    augmenters = report.augmenters
    if augmenters is None:
        raise ConfigError("importance-dump needs a committee run that trains augmenters")
    limit = min(config.limit, data.test_indices.size)
    ids = [int(i) for i in data.test_indices[:limit]]
    batch = data.batch(np.asarray(ids))
    with T.no_tape():
        _, taps = student.forward(batch)
        w = teacher_importance(augmenters.question, taps[student.tap_out])
    os.makedirs(config.out, exist_ok=True)
    csv_path = os.path.join(config.out, "importance.csv")
    write_importance_csv(csv_path, ids, w.values())
    report.save(os.path.join(config.out, "report.json"))
    total = report.teacher_passes["invoked"] + report.teacher_passes["skipped"]
    if config.threshold is not None and total:
        rate = 100.0 * report.teacher_passes["skipped"] / total
        msg = (f"threshold {config.threshold:g}: skipped {report.teacher_passes['skipped']} "
               f"of {total} teacher passes ({rate:.1f}%)")
    else:
        msg = f"no selection threshold: all {total} teacher passes invoked"
    print(msg)
    print(f"wrote {csv_path} ({limit} examples x {len(teachers)} teachers)")
    return csv_path


# ---------------------------------------------------------------------------


def main(argv: list[str] | None = None) -> int:
    try:
        config = parse_args(argv)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    try:
        if config.command == "run":
            cmd_run(config)
        elif config.command == "report":
            cmd_report(config)
        else:
            cmd_importance_dump(config)
    except (ConfigError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except DivergenceError as e:
        print(f"numerical divergence: {e}", file=sys.stderr)
        for key, value in e.diagnostics.items():
            print(f"  {key}: {value}", file=sys.stderr)
        if e.snapshot is not None:
            os.makedirs(config.out, exist_ok=True)
            dump = os.path.join(config.out, "last_good_params.npz")
            np.savez(dump, **e.snapshot)
            print(f"last-good parameters saved to {dump}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
