"""Command line entry point: ``vesseldistill <command> [flags]``.

Exit codes: 0 success, 1 usage or input error, 2 runtime failure.
Training commands accept ``--config run.json``; explicit flags override it.
When ``--out`` is omitted, outputs go under ``$VESSELDISTILL_OUTPUT_ROOT``
(default ``./runs``) in a folder named after the command.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .codebook import code_perplexity
from .errors import (CheckpointError, ConfigurationError, DimensionError, FormatError,
                     StitchingError, TrainingAborted)
from .losses import TERM_NAMES, LossWeights
from .metrics import evaluate
from .phantom import make_dataset
from .pipeline import (MetricsLog, PhantomData, RunConfig, distill_student, finetune_teacher,
                       infer_volume, pretrain_teacher, restore_model, train_supervised)
from .volume import Volume, percentile_clip_normalize, read_volume, write_volume

OUTPUT_ROOT_ENV = "VESSELDISTILL_OUTPUT_ROOT"
CHECKPOINT_NAME = "checkpoint.vdck"
LOG_NAME = "metrics.jsonl"
CONFIG_NAME = "config.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# flag name -> RunConfig field; weights live in a nested dict
_RUN_FLAGS = {
    "epochs": "epochs", "batch_size": "batch_size", "patch_size": "patch_size",
    "patch_stride": "patch_stride", "patches_per_volume": "patches_per_volume",
    "lr": "learning_rate", "lr_decay": "lr_decay", "seed": "seed", "scale": "scale",
    "quantizer": "quantizer", "codebook_size": "codebook_size", "codebook_init": "codebook_init",
    "codebook_lr_scale": "codebook_lr_scale", "reconstruction": "reconstruction",
    "feature_target": "feature_target", "distill_on": "distill_on",
    "labeled_ratio": "labeled_ratio", "pseudo_threshold": "pseudo_threshold",
    "infer_overlap": "infer_overlap",
}
_WEIGHT_FLAGS = ("alpha", "beta_max", "ramp_epochs", "gamma", "lam")


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="dataset manifest.json")
    p.add_argument("--out", help="output directory")
    p.add_argument("--config", help="JSON run config; flags override its values")
    p.add_argument("--force", action="store_true", help="overwrite an existing run directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--patch-size", type=int)
    p.add_argument("--patch-stride", type=int)
    p.add_argument("--patches-per-volume", type=int)
    p.add_argument("--lr", type=float, help="initial learning rate")
    p.add_argument("--lr-decay", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--scale", choices=("desk", "paper"))
    p.add_argument("--infer-overlap", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vesseldistill", description="Codebook teacher / student distillation toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic phantom dataset")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--unlabeled", type=int, default=40)
    g.add_argument("--labeled", type=int, default=8)
    g.add_argument("--test", type=int, default=0)
    g.add_argument("--dims", type=int, nargs="+", default=[32])
    g.add_argument("--out")
    g.add_argument("--force", action="store_true")

    p = sub.add_parser("pretrain", help="reconstruction + codebook pretraining of the teacher")
    _add_run_flags(p)
    p.add_argument("--quantizer", choices=("gumbel", "argmin"))
    p.add_argument("--codebook-size", type=int)
    p.add_argument("--codebook-init", choices=("uniform", "kmeans_warmstart"))
    p.add_argument("--codebook-lr-scale", type=float)
    p.add_argument("--reconstruction", choices=("mse", "l1"))
    p.add_argument("--alpha", type=float)
    p.add_argument("--lam", type=float)
    p.add_argument("--resume", help="checkpoint to continue from")

    f = sub.add_parser("finetune", help="Dice fine-tuning of a pretrained teacher")
    _add_run_flags(f)
    f.add_argument("--teacher", required=True, help="pretrained teacher checkpoint")

    d = sub.add_parser("distill", help="train the student from a fine-tuned teacher")
    _add_run_flags(d)
    d.add_argument("--teacher", help="fine-tuned teacher checkpoint")
    d.add_argument("--beta-max", type=float)
    d.add_argument("--ramp-epochs", type=int)
    d.add_argument("--gamma", type=float)
    d.add_argument("--feature-target", choices=("codebook", "intermediate"))
    d.add_argument("--distill-on", choices=("both", "labeled", "unlabeled"))
    d.add_argument("--labeled-ratio", type=int)
    d.add_argument("--pseudo-threshold", type=float)

    i = sub.add_parser("infer", help="tiled inference on volume files")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--input", required=True, help="a .vvol file or a directory of them")
    i.add_argument("--out")
    i.add_argument("--patch-size", type=int, default=32)
    i.add_argument("--overlap", type=int, default=0)

    e = sub.add_parser("evaluate", help="score predictions against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--threshold", type=float, default=0.5)
    e.add_argument("--eps", type=float, default=1.0, help="Sinkhorn regulariser (voxel^2)")
    e.add_argument("--out", help="also write the per-volume records here")

    c = sub.add_parser("inspect-codebook", help="dump codebook entries and usage")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--out", help="write JSON here instead of stdout")

    x = sub.add_parser("export-curves", help="per-term loss curves as CSV")
    x.add_argument("--run-dir", required=True)
    x.add_argument("--out")
    return parser


def _out_dir(args, command: str) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / command


def resolve_config(args, stage: str) -> RunConfig:
    """Merge ``--config`` (if any) with explicit flags; flags win."""
    base: Dict = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigurationError(f"config file {path} not found")
        base = json.loads(path.read_text())
    weights = dict(base.pop("weights", {}) or {})
    for flag, key in _RUN_FLAGS.items():
        val = getattr(args, flag, None)
        if val is not None:
            base[key] = val
    for flag in _WEIGHT_FLAGS:
        val = getattr(args, flag, None)
        if val is not None:
            weights[flag] = val
    if stage == "distill" and "ramp_epochs" not in weights:
        epochs = base.get("epochs")
        weights["ramp_epochs"] = max(1, round(0.2 * epochs)) if epochs else 10
    base["stage"] = stage
    base["weights"] = LossWeights(**weights)
    base["manifest"] = str(args.data)
    base["output_dir"] = str(_out_dir(args, stage))
    return RunConfig.from_dict(base).resolved()


def _prepare_run_dir(out: Path, force: bool, resume: bool = False) -> None:
    if (out / CHECKPOINT_NAME).exists() and not (force or resume):
        raise FileExistsError(f"{out} already holds a checkpoint; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    if not resume and (out / LOG_NAME).exists():
        (out / LOG_NAME).unlink()


def _snapshot(out: Path, cfg: RunConfig, extra: Optional[Dict] = None) -> None:
    d = cfg.to_dict()
    if extra:
        d.update(extra)
    (out / CONFIG_NAME).write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")


def _finish(out: Path, result) -> Dict:
    digest = save_checkpoint(result.checkpoint, out / CHECKPOINT_NAME)
    summary = {"checkpoint": str(out / CHECKPOINT_NAME), "sha256": digest,
               "epochs": result.checkpoint.epoch, "metrics": result.checkpoint.metrics}
    print(json.dumps(summary, sort_keys=True))
    return summary


def cmd_gen_data(args) -> int:
    dims = args.dims * 3 if len(args.dims) == 1 else args.dims
    if len(dims) != 3:
        raise ConfigurationError("--dims takes one value or three")
    out = _out_dir(args, "data")
    m = make_dataset(args.seed, args.unlabeled, args.labeled, tuple(dims), out, args.test, args.force)
    (out / CONFIG_NAME).write_text(json.dumps(
        {"seed": args.seed, "unlabeled": args.unlabeled, "labeled": args.labeled,
         "test": args.test, "dims": dims}, indent=2, sort_keys=True) + "\n")
    print(json.dumps({"out": str(out), "volumes": len(m["volumes"])}))
    return 0


def cmd_pretrain(args) -> int:
    cfg = resolve_config(args, "pretrain")
    out = Path(cfg.output_dir)
    resume = load_checkpoint(args.resume) if args.resume else None
    _prepare_run_dir(out, args.force, resume is not None)
    _snapshot(out, cfg)
    data = PhantomData.from_manifest(cfg.manifest)
    res = pretrain_teacher(cfg, data, resume=resume, metrics_log=MetricsLog(out / LOG_NAME))
    _finish(out, res)
    return 0


def cmd_finetune(args) -> int:
    cfg = resolve_config(args, "finetune")
    out = Path(cfg.output_dir)
    _prepare_run_dir(out, args.force)
    _snapshot(out, cfg, {"teacher": str(args.teacher)})
    pre = load_checkpoint(args.teacher)
    if pre.descriptor.get("kind") != "teacher":
        raise ConfigurationError(f"{args.teacher} is not a teacher checkpoint")
    data = PhantomData.from_manifest(cfg.manifest)
    _finish(out, finetune_teacher(cfg, data, pre, metrics_log=MetricsLog(out / LOG_NAME)))
    return 0


def cmd_distill(args) -> int:
    cfg = resolve_config(args, "distill")
    w = cfg.weights
    if args.teacher is None and (w.beta_max > 0 or w.gamma > 0):
        raise ConfigurationError(
            "distill needs --teacher PATH (a fine-tuned teacher checkpoint from `finetune`); "
            "pass --beta-max 0 --gamma 0 to train the supervised baseline instead")
    out = Path(cfg.output_dir)
    _prepare_run_dir(out, args.force)
    _snapshot(out, cfg, {"teacher": args.teacher})
    data = PhantomData.from_manifest(cfg.manifest)
    log = MetricsLog(out / LOG_NAME)
    if args.teacher is None:
        res = train_supervised(cfg, data, metrics_log=log)
    else:
        ckpt = load_checkpoint(args.teacher)
        if ckpt.descriptor.get("kind") != "teacher":
            raise ConfigurationError(f"{args.teacher} is not a teacher checkpoint")
        res = distill_student(cfg, data, restore_model(ckpt), metrics_log=log)
    _finish(out, res)
    return 0


def cmd_infer(args) -> int:
    model = restore_model(load_checkpoint(args.checkpoint))
    src = Path(args.input)
    if src.is_dir():
        files = sorted(p for p in src.glob("*.vvol") if not p.stem.endswith("_label"))
    elif src.is_file():
        files = [src]
    else:
        raise FileNotFoundError(f"input {src} not found")
    if not files:
        raise ConfigurationError(f"no .vvol volumes in {src}")
    out = _out_dir(args, "infer")
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_NAME).write_text(json.dumps(
        {"checkpoint": str(args.checkpoint), "input": str(src), "patch_size": args.patch_size,
         "overlap": args.overlap}, indent=2, sort_keys=True) + "\n")
    for f in files:
        vol = read_volume(f)
        if vol.kind != "intensity":
            continue
        prob = infer_volume(model, percentile_clip_normalize(vol), args.patch_size, args.overlap)
        stem = f.stem[:-len("_image")] if f.stem.endswith("_image") else f.stem
        write_volume(Volume(prob.voxels, vol.spacing_um, "probability"), out / f"{stem}_prob.vvol")
    print(json.dumps({"out": str(out), "volumes": len(files)}))
    return 0


def cmd_evaluate(args) -> int:
    for d in (args.pred, args.gt):
        if not Path(d).is_dir():
            raise FileNotFoundError(f"directory {d} not found")
    report = evaluate(args.pred, args.gt, args.threshold, args.eps)
    if not report.per_volume:
        raise ConfigurationError("no matching prediction / ground-truth pairs")
    lines = report.records()
    for line in lines:
        print(line)
    print(report.table("prediction"))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics_report.jsonl").write_text("\n".join(lines) + "\n")
        (out / "metrics_table.txt").write_text(report.table("prediction") + "\n")
        (out / CONFIG_NAME).write_text(json.dumps(
            {"pred": args.pred, "gt": args.gt, "threshold": args.threshold, "eps": args.eps},
            indent=2, sort_keys=True) + "\n")
    return 0


def cmd_inspect_codebook(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.descriptor.get("kind") != "teacher":
        raise ConfigurationError(f"{args.checkpoint} holds no codebook")
    model = restore_model(ckpt)
    cb = model.codebook
    counts = cb.usage_counts
    info = {
        "size": cb.size, "dim": cb.dim,
        "used_codes": int(np.count_nonzero(counts)),
        "lifetime_perplexity": code_perplexity(cb) if counts.sum() else None,
        "window_perplexity": ckpt.metrics.get("perplexity"),
        "eval_perplexity": ckpt.metrics.get("eval_perplexity"),
        "usage_counts": counts.tolist(),
        "entry_norms": np.linalg.norm(cb.entries.data, axis=1).tolist(),
        "entries": cb.entries.data.tolist(),
    }
    text = json.dumps(info, indent=1)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return 0


def read_log(path: Path) -> List[Dict]:
    if not path.is_file():
        return []
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def cmd_export_curves(args) -> int:
    run = Path(args.run_dir)
    records = read_log(run / LOG_NAME)
    if not records:
        raise ConfigurationError(f"no metrics records in {run / LOG_NAME}")
    out = Path(args.out) if args.out else run
    out.mkdir(parents=True, exist_ok=True)
    by_stage: Dict[str, List[Dict]] = {}
    for r in records:
        by_stage.setdefault(r.get("stage", "run"), []).append(r)
    written = []
    for stage, recs in by_stage.items():
        extras = sorted({k for r in recs for k in r} - set(TERM_NAMES)
                        - {"stage", "epoch", "total", "steps"})
        header = ["epoch", *TERM_NAMES, "total", *extras]
        path = out / f"{stage}_curves.csv"
        with path.open("w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(header)
            for r in recs:
                wr.writerow([r.get(h, "") if h != "epoch" else r["epoch"] for h in header])
        written.append(str(path))
    print(json.dumps({"written": written}))
    return 0


_COMMANDS = {
    "gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
    "distill": cmd_distill, "infer": cmd_infer, "evaluate": cmd_evaluate,
    "inspect-codebook": cmd_inspect_codebook, "export-curves": cmd_export_curves,
}

_USER_ERRORS = (UsageError, ConfigurationError, DimensionError, FileNotFoundError, FileExistsError)
_RUNTIME_ERRORS = (TrainingAborted, CheckpointError, FormatError, StitchingError)


def run(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except TrainingAborted as exc:
        out = _out_dir(args, args.command)
        if out.is_dir():
            (out / "abort_snapshot.json").write_text(json.dumps(exc.snapshot, indent=2, default=str))
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except _RUNTIME_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except _USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())
