"""Command-line entry point: every pipeline stage plus verification suites.

Exit codes: 0 success, 1 validation/usage error, 2 runtime failure. Progress
goes to stderr; machine artifacts live under ``<out>/<config-hash>/``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import gradcheck, pipeline
from .config import ExperimentConfig, load_config, save_config
from .models import (
    QualityModel,
    SegModel,
    checkpoint_of,
    init_from_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from .phantom import (
    DatasetSplit,
    load_mask,
    load_pseudo_label_set,
    load_volume,
    save_mask,
    save_pseudo_label_set,
    save_volume,
)

log = logging.getLogger("distillseg")

STAGES = [
    "gen-data",
    "train-teacher",
    "pseudo-label",
    "train-qc",
    "filter",
    "train-student",
    "evaluate",
    "ablate",
    "grad-check",
    "report",
]


class CliError(Exception):
    """Usage or validation problem; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); the contract wants 1
        raise CliError(f"{message}\n{self.format_usage()}")


def build_parser() -> _Parser:
    parser = _Parser(prog="distillseg", description=__doc__)
    sub = parser.add_subparsers(dest="stage", metavar="{" + ",".join(STAGES) + "}")
    for stage in STAGES:
        p = sub.add_parser(stage, add_help=True)
        p.add_argument("--config", type=Path, default=None, help="JSON config file")
        p.add_argument("--out", type=Path, default=Path("runs"), help="output root directory")
        p.add_argument("--seed", type=int, default=None, help="set data/model/train seeds")
        p.add_argument("--n-labeled", type=int, default=None)
        p.add_argument("--alpha", type=float, default=None)
        p.add_argument("--tau", type=float, default=None)
        p.add_argument("--qc-threshold", type=float, default=None)
        p.add_argument("--epochs", type=int, default=None, help="override every epoch count")
        p.add_argument("--force", action="store_true", help="recompute existing outputs")
        p.add_argument("--no-kd", action="store_true")
        p.add_argument("--no-teacher-ckpt", action="store_true")
        p.add_argument("--no-qc", action="store_true")
        if stage == "report":
            p.add_argument("--format", choices=["text", "csv"], default="text")
    return parser


def effective_config(args) -> ExperimentConfig:
    if args.config is not None:
        if not Path(args.config).exists():
            raise CliError(f"config file not found: {args.config}")
        cfg = load_config(args.config)
    else:
        cfg = ExperimentConfig()
    over = {}
    if args.seed is not None:
        over.update(seed_data=args.seed, seed_model=args.seed, seed_train=args.seed)
    if args.n_labeled is not None:
        over["n_labeled"] = args.n_labeled
    if args.alpha is not None:
        over["alpha"] = args.alpha
    if args.tau is not None:
        over["tau"] = args.tau
    if args.qc_threshold is not None:
        over["qc_threshold"] = args.qc_threshold
    if args.epochs is not None:
        over.update(
            epochs_teacher=args.epochs,
            epochs_student=args.epochs,
            epochs_student_init=args.epochs,
            epochs_qc=args.epochs,
        )
    if args.no_kd:
        over["use_kd"] = False
    if args.no_teacher_ckpt:
        over["use_teacher_ckpt"] = False
    if args.no_qc:
        over["use_qc"] = False
    return replace(cfg, **over) if over else cfg


# ---------------------------------------------------------------------------
# run-directory helpers


def _run_dir(args, cfg: ExperimentConfig) -> Path:
    run = Path(args.out) / cfg.config_hash
    run.mkdir(parents=True, exist_ok=True)
    (run / "metrics").mkdir(exist_ok=True)
    save_config(cfg, run / "config.json")  # effective merged config, written up front
    fh = logging.FileHandler(run / "log.txt")
    fh.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    log.addHandler(fh)
    return run


def _write_json(path: Path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_data(run: Path, cfg: ExperimentConfig) -> pipeline.PhantomSet:
    data_dir = run / "data"
    volumes, masks = {}, {}
    for vid in range(cfg.n_volumes):
        vol_path = data_dir / f"vol_{vid:03d}.vol"
        msk_path = data_dir / f"vol_{vid:03d}.msk"
        if not vol_path.exists() or not msk_path.exists():
            raise CliError(f"missing {vol_path.name}/{msk_path.name}; run gen-data first")
        volumes[vid] = load_volume(vol_path)
        masks[vid] = load_mask(msk_path, cfg.num_classes)
    return pipeline.PhantomSet(volumes, masks, cfg.num_classes)


def _load_split(run: Path) -> DatasetSplit:
    path = run / "split.json"
    if not path.exists():
        raise CliError(f"missing {path}; run gen-data first")
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    return DatasetSplit(
        labeled=raw["labeled"],
        unlabeled=raw["unlabeled"],
        validation=raw["validation"],
        calibration=raw["calibration"],
    )


def _load_seg(run: Path, cfg: ExperimentConfig, name: str) -> SegModel:
    path = run / name
    if not path.exists():
        raise CliError(f"missing {path}; run the producing stage first")
    model = SegModel(cfg.channels_base, cfg.depth, cfg.num_classes, seed=cfg.seed_model)
    init_from_checkpoint(model, load_checkpoint(path))
    model.freeze()
    return model


def _skip(path: Path, force: bool, verify) -> bool:
    """True when an existing output verifies and recomputation is skipped."""
    if force or not path.exists():
        return False
    try:
        verify()
    except Exception as exc:
        raise CliError(f"existing output {path} failed verification: {exc}") from exc
    log.info("verified existing %s; skipping (use --force to recompute)", path.name)
    return True


# ---------------------------------------------------------------------------
# stages


def _stage_gen_data(args, cfg: ExperimentConfig, run: Path) -> None:
    data_dir = run / "data"
    split_path = run / "split.json"

    def verify():
        _load_data(run, cfg)
        _load_split(run)

    if _skip(split_path, args.force, verify):
        return
    data_dir.mkdir(exist_ok=True)
    data = pipeline.generate_dataset(cfg)
    for vid in range(cfg.n_volumes):
        save_volume(data.volumes[vid], data_dir / f"vol_{vid:03d}.vol")
        save_mask(data.masks[vid], data_dir / f"vol_{vid:03d}.msk")
    split = pipeline.split_for(cfg)
    _write_json(
        split_path,
        {
            "stage": "gen-data",
            "config_hash": cfg.config_hash,
            "labeled": split.labeled,
            "unlabeled": split.unlabeled,
            "validation": split.validation,
            "calibration": split.calibration,
        },
    )
    log.info("generated %d volumes into %s", cfg.n_volumes, data_dir)


def _stage_train_teacher(args, cfg: ExperimentConfig, run: Path) -> None:
    out = run / "teacher.ckpt"

    def verify():
        ckpt = load_checkpoint(out)
        model = SegModel(cfg.channels_base, cfg.depth, cfg.num_classes, seed=cfg.seed_model)
        if ckpt.arch_hash != model.arch_hash:
            raise ValueError("checkpoint architecture does not match config")

    if _skip(out, args.force, verify):
        return
    data = _load_data(run, cfg)
    split = _load_split(run)
    teacher, curve = pipeline.train_teacher(cfg, data, split)
    save_checkpoint(checkpoint_of(teacher, step=len(curve)), out)
    _write_json(
        run / "metrics" / "teacher_curve.json",
        {"stage": "train-teacher", "config_hash": cfg.config_hash, "curve": curve},
    )


def _stage_pseudo_label(args, cfg: ExperimentConfig, run: Path) -> None:
    out = run / "pseudo.pls"

    def verify():
        pls = load_pseudo_label_set(out)
        if pls.config_hash != cfg.config_hash:
            raise ValueError(f"pseudo-label set was built by config {pls.config_hash}")

    if _skip(out, args.force, verify):
        return
    data = _load_data(run, cfg)
    split = _load_split(run)
    teacher = _load_seg(run, cfg, "teacher.ckpt")
    pls = pipeline.generate_pseudo_labels(cfg, teacher, data, split)
    save_pseudo_label_set(pls, out)
    log.info("wrote %d pseudo-labeled slices", len(pls.entries))


def _stage_train_qc(args, cfg: ExperimentConfig, run: Path) -> None:
    out = run / "qc.ckpt"

    def verify():
        ckpt = load_checkpoint(out)
        model = QualityModel(cfg.num_classes, seed=cfg.seed_model)
        if ckpt.arch_hash != model.arch_hash:
            raise ValueError("checkpoint architecture does not match config")

    if _skip(out, args.force, verify):
        return
    data = _load_data(run, cfg)
    split = _load_split(run)
    teacher = _load_seg(run, cfg, "teacher.ckpt")
    qcset = pipeline.make_qc_dataset(cfg, teacher, data, split)
    qc_model, acc, curve = pipeline.train_quality_classifier(cfg, qcset)
    save_checkpoint(checkpoint_of(qc_model, step=len(curve)), out)
    _write_json(
        run / "metrics" / "qc.json",
        {
            "stage": "train-qc",
            "config_hash": cfg.config_hash,
            "heldout_accuracy": acc,
            "train_size": len(qcset.train),
            "heldout_size": len(qcset.heldout),
            "score_histogram": qcset.score_histogram,
            "curve": curve,
        },
    )


def _stage_filter(args, cfg: ExperimentConfig, run: Path) -> None:
    out = run / "pseudo.pls"
    if not out.exists():
        raise CliError(f"missing {out}; run pseudo-label first")
    pls = load_pseudo_label_set(out)
    if not args.force and pls.entries and all(e.quality_score is not None for e in pls.entries):
        log.info("pseudo-labels already scored; skipping (use --force to recompute)")
        return
    data = _load_data(run, cfg)
    qc_path = run / "qc.ckpt"
    if not qc_path.exists():
        raise CliError(f"missing {qc_path}; run train-qc first")
    qc_model = QualityModel(cfg.num_classes, seed=cfg.seed_model)
    init_from_checkpoint(qc_model, load_checkpoint(qc_path))
    qc_model.freeze()
    pls = pipeline.filter_pseudo_labels(cfg, qc_model, pls, data)
    save_pseudo_label_set(pls, out)


def _stage_train_student(args, cfg: ExperimentConfig, run: Path) -> None:
    out = run / "student.ckpt"

    def verify():
        ckpt = load_checkpoint(out)
        model = SegModel(cfg.channels_base, cfg.depth, cfg.num_classes, seed=cfg.seed_model)
        if ckpt.arch_hash != model.arch_hash:
            raise ValueError("checkpoint architecture does not match config")

    if _skip(out, args.force, verify):
        return
    data = _load_data(run, cfg)
    split = _load_split(run)
    teacher = _load_seg(run, cfg, "teacher.ckpt")
    pls_path = run / "pseudo.pls"
    if not pls_path.exists():
        raise CliError(f"missing {pls_path}; run pseudo-label first")
    pls = load_pseudo_label_set(pls_path)
    student, curve = pipeline.train_student(cfg, data, split, teacher, pls)
    save_checkpoint(checkpoint_of(student, step=len(curve)), out)
    _write_json(
        run / "metrics" / "student_curve.json",
        {"stage": "train-student", "config_hash": cfg.config_hash, "curve": curve},
    )


def _stage_evaluate(args, cfg: ExperimentConfig, run: Path) -> None:
    data = _load_data(run, cfg)
    split = _load_split(run)
    evaluated = []
    for name in ("teacher", "student"):
        ckpt_path = run / f"{name}.ckpt"
        if not ckpt_path.exists():
            continue
        out = run / "metrics" / f"{name}.json"

        def verify(out=out):
            with open(out, "r", encoding="utf-8") as fh:
                report = json.load(fh)
            if report.get("config_hash") != cfg.config_hash:
                raise ValueError("metrics were produced by a different config")

        if _skip(out, args.force, verify):
            evaluated.append(name)
            continue
        model = _load_seg(run, cfg, f"{name}.ckpt")
        report = pipeline.evaluate_model(cfg, model, data, split.validation)
        report["stage"] = "evaluate"
        report["model"] = name
        _write_json(out, report)
        log.info("%s validation mIoU %.4f dice %.4f", name, report["mean_iou"], report["mean_dice"])
        evaluated.append(name)
    if not evaluated:
        raise CliError("no checkpoints to evaluate; run train-teacher (and train-student) first")


def _stage_ablate(args, cfg: ExperimentConfig, run: Path) -> None:
    out = run / "ablation.json"

    def verify():
        with open(out, "r", encoding="utf-8") as fh:
            table = json.load(fh)
        if table.get("config_hash") != cfg.config_hash:
            raise ValueError("ablation table was produced by a different config")

    if _skip(out, args.force, verify):
        return
    table = pipeline.run_ablation(cfg)
    _write_json(out, table)


def _stage_grad_check(args, cfg: ExperimentConfig, run: Path) -> int:
    results = gradcheck.run_all()
    failed = {k: v for k, v in results.items() if v >= gradcheck.TOLERANCE}
    for name, err in sorted(results.items()):
        status = "FAIL" if name in failed else "ok"
        print(f"{status:4s} {name:30s} max rel err {err:.3e}", file=sys.stderr)
    _write_json(
        run / "metrics" / "grad_check.json",
        {"stage": "grad-check", "config_hash": cfg.config_hash, "max_rel_error": results},
    )
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# report rendering


def _fmt_pct(v) -> str:
    return "" if v is None else f"{100 * v:.1f}"


def _fmt_delta(v) -> str:
    return "" if v is None else f"({100 * v:+.1f})"


def _render_rows(rows: list[list[str]], fmt: str) -> str:
    if fmt == "csv":
        return "\n".join(",".join(cell for cell in row) for row in rows)
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = []
    for i, row in enumerate(rows):
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _stage_report(args, cfg: ExperimentConfig, run: Path) -> None:
    root = Path(args.out)
    ablations = []
    sweep_points = []
    for cfg_path in sorted(root.glob("*/config.json")):
        run_dir = cfg_path.parent
        with open(cfg_path, "r", encoding="utf-8") as fh:
            run_cfg = json.load(fh)
        abl_path = run_dir / "ablation.json"
        if abl_path.exists():
            with open(abl_path, "r", encoding="utf-8") as fh:
                ablations.append((run_cfg, json.load(fh)))
        teacher_path = run_dir / "metrics" / "teacher.json"
        student_path = run_dir / "metrics" / "student.json"
        if teacher_path.exists() and student_path.exists():
            with open(teacher_path) as fh:
                teacher = json.load(fh)
            with open(student_path) as fh:
                student = json.load(fh)
            proposed = run_cfg["use_kd"] and run_cfg["use_teacher_ckpt"] and run_cfg["use_qc"]
            if proposed:
                sweep_points.append(
                    {
                        "n_labeled": run_cfg["n_labeled"],
                        "proposed_iou": student["mean_iou"],
                        "proposed_dice": student["mean_dice"],
                        "baseline_iou": teacher["mean_iou"],
                        "baseline_dice": teacher["mean_dice"],
                    }
                )

    out = []
    if sweep_points:
        out.append("Labeled-volume sweep (proposed vs fully-supervised baseline):")
        rows = [["n_labeled", "mIoU proposed", "mIoU baseline", "Dice proposed", "Dice baseline"]]
        by_level: dict[int, list[dict]] = {}
        for p in sweep_points:
            by_level.setdefault(p["n_labeled"], []).append(p)
        for level in sorted(by_level):
            pts = by_level[level]
            rows.append(
                [
                    str(level),
                    _fmt_pct(float(np.mean([p["proposed_iou"] for p in pts]))),
                    _fmt_pct(float(np.mean([p["baseline_iou"] for p in pts]))),
                    _fmt_pct(float(np.mean([p["proposed_dice"] for p in pts]))),
                    _fmt_pct(float(np.mean([p["baseline_dice"] for p in pts]))),
                ]
            )
        out.append(_render_rows(rows, args.format))
    for run_cfg, table in ablations:
        out.append(
            f"\nAblation (config {table['config_hash']}, seed {run_cfg['seed_train']}):"
        )
        rows = [["Method", "mIoU (%)", "Dice (%)"]]
        for r in table["rows"]:
            rows.append(
                [
                    r["name"],
                    f"{_fmt_pct(r['mean_iou'])} {_fmt_delta(r.get('delta_iou'))}".strip(),
                    f"{_fmt_pct(r['mean_dice'])} {_fmt_delta(r.get('delta_dice'))}".strip(),
                ]
            )
        out.append(_render_rows(rows, args.format))
    if not out:
        raise CliError(f"no metrics found under {root}")
    print("\n".join(out))


_HANDLERS = {
    "gen-data": _stage_gen_data,
    "train-teacher": _stage_train_teacher,
    "pseudo-label": _stage_pseudo_label,
    "train-qc": _stage_train_qc,
    "filter": _stage_filter,
    "train-student": _stage_train_student,
    "evaluate": _stage_evaluate,
    "ablate": _stage_ablate,
    "grad-check": _stage_grad_check,
    "report": _stage_report,
}


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.stage is None:
            raise CliError(parser.format_usage())
        cfg = effective_config(args)
        if args.stage == "report":  # report only reads existing run dirs
            _stage_report(args, cfg, Path(args.out))
            return 0
        run = _run_dir(args, cfg)
        code = _HANDLERS[args.stage](args, cfg, run)
        return int(code) if code else 0
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2
    finally:
        for handler in list(log.handlers):
            if isinstance(handler, logging.FileHandler):
                log.removeHandler(handler)
                handler.close()


if __name__ == "__main__":
    sys.exit(main())
