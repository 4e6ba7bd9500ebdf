"""Command-line entry point: ``hmid <command> [flags]``.

Every command writes its results (JSON, TSV, PNG figures, checkpoints)
under ``--out`` and prints a tab-delimited summary to stdout. Failures
print one ``error<TAB>kind=...<TAB>message=...`` line to stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import evaluation as ev
from . import plotting
from .data import MID_CAPTIONS, generate_corpus, load_corpus
from .encoders import CheckpointError, load_checkpoint
from .gradcheck import run_all
from .trainer import (ConfigError, TrainConfig, TrainingError, config_hash, load_config,
                      load_teacher, train_loop, train_teacher)

EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3

log = logging.getLogger("hmid")


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int = EXIT_FAILURE):
        super().__init__(message)
        self.kind = kind
        self.code = code


def _setup_logging() -> None:
    level = os.environ.get("HMID_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise CliError("config", f"HMID_LOG must be one of {sorted(levels)}, got {level!r}",
                       EXIT_CONFIG)
    logging.basicConfig(level=levels[level], format="%(asctime)s %(name)s %(message)s",
                        stream=sys.stderr)


def _emit(rows: list[dict], columns: list[str]) -> None:
    print("\t".join(columns))
    for row in rows:
        print("\t".join(_fmt(row.get(c, "")) for c in columns))


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def _write_tsv(path: Path, rows: list[dict], columns: list[str]) -> None:
    lines = ["\t".join(columns)] + ["\t".join(_fmt(r.get(c, "")) for c in columns) for r in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError("io", f"{out}: {exc.strerror}") from exc
    return out


def _config(args, **forced) -> TrainConfig:
    overrides = {"seed": args.seed, "mask_ratio": getattr(args, "mask_ratio", None),
                 "lambda_distill": getattr(args, "lambda_distill", None),
                 "lambda_entail": getattr(args, "lambda_entail", None),
                 "lambda_hierarchy": getattr(args, "lambda_hierarchy", None),
                 "max_iters": getattr(args, "iters", None),
                 "batch_size": getattr(args, "batch", None)}
    overrides.update(forced)
    return load_config(args.config, overrides)


def _corpus(args):
    if not args.data:
        raise CliError("usage", "--data is required", EXIT_USAGE)
    try:
        corpus = load_corpus(args.data)
    except FileNotFoundError as exc:
        raise CliError("io", str(exc)) from exc
    return corpus.subset("train"), corpus.subset("val")


def _checkpoint(path):
    if not path:
        raise CliError("usage", "--checkpoint is required", EXIT_USAGE)
    try:
        params, _ = load_checkpoint(path)
    except (CheckpointError, OSError) as exc:
        raise CliError("io", str(exc)) from exc
    return params


def _teacher(path):
    if not path:
        raise CliError("usage", "--teacher is required", EXIT_USAGE)
    try:
        return load_teacher(path)
    except (CheckpointError, OSError) as exc:
        raise CliError("io", str(exc)) from exc


# -- commands -------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    out = _out_dir(args)
    manifest = generate_corpus(args.n, args.seed, args.image_size, out)
    _emit([{"manifest": str(manifest), "n": args.n, "seed": args.seed}], ["manifest", "n", "seed"])
    return 0


def _finish_training(args, result, config: TrainConfig, out: Path, val, kind: str) -> None:
    if result.metrics:
        plotting.plot_training_curves(result.metrics, out / "training.png")
    row = {"task": kind, "config_hash": result.config_hash,
           "checkpoint": str(result.final_checkpoint)}
    if val is not None and len(val) and config.mode != "clip":
        table = ev.retrieval_recall(result.params, val.images, val.specific)
        row["recall_at_1"] = ev.mean_recall_at_1(table)
        ev.write_result(out / "result.json", kind, {"retrieval": table,
                                                     "recall_at_1": row["recall_at_1"]},
                        result.config_hash, str(result.final_checkpoint))
    _emit([row], list(row))


def cmd_train_teacher(args) -> int:
    config = _config(args)
    train, val = _corpus(args)
    out = _out_dir(args)
    result = train_teacher(config, train, out_dir=out, val=val,
                           gate=None if args.no_gate else 0.9)
    _finish_training(args, result, config, out, None, "train-teacher")
    return 0


def _train_student(args, mode: str, teacher=None) -> int:
    config = _config(args, mode=mode)
    train, val = _corpus(args)
    out = _out_dir(args)
    result = train_loop(config, train, teacher, out_dir=out, val=val)
    _finish_training(args, result, config, out, val, {"hmid": "distill", "meru": "train-meru",
                                                      "clip": "train-clip-baseline"}[mode])
    return 0


def cmd_distill(args) -> int:
    return _train_student(args, "hmid", _teacher(args.teacher))


def cmd_train_meru(args) -> int:
    return _train_student(args, "meru")


def cmd_train_clip(args) -> int:
    return _train_student(args, "clip")


def cmd_eval_classify(args) -> int:
    params = _checkpoint(args.checkpoint)
    _, val = _corpus(args)
    if args.level == "mid":
        prompts = list(MID_CAPTIONS.values())
        labels = [prompts.index(m) for m in val.mid]
    else:
        prompts = list(val.specific)
        labels = list(range(len(prompts)))
    res = ev.zero_shot_classify(params, val.images, labels, prompts)
    out = _out_dir(args)
    ev.write_result(out / "classify.json", "eval-classify",
                    {"accuracy": res.accuracy, "level": args.level, "classes": len(prompts),
                     "per_class": res.per_class if args.level == "mid" else {}},
                    str(params.checksum())[:16], args.checkpoint)
    _emit([{"level": args.level, "classes": len(prompts), "accuracy": res.accuracy}],
          ["level", "classes", "accuracy"])
    return 0


def cmd_eval_retrieve(args) -> int:
    params = _checkpoint(args.checkpoint)
    _, val = _corpus(args)
    table = ev.retrieval_recall(params, val.images, val.specific)
    out = _out_dir(args)
    ev.write_result(out / "retrieval.json", "eval-retrieve", table,
                    str(params.checksum())[:16], args.checkpoint)
    rows = [{"direction": d, **{f"R@{k}": v for k, v in table[d].items()}} for d in table]
    _write_tsv(out / "retrieval.tsv", rows, ["direction", "R@1", "R@5", "R@10"])
    _emit(rows, ["direction", "R@1", "R@5", "R@10"])
    return 0


def cmd_traverse(args) -> int:
    params = _checkpoint(args.checkpoint)
    _, val = _corpus(args)
    if args.limit:
        keep = np.arange(min(args.limit, len(val)))
        val = type(val)(val.images[keep], [val.specific[i] for i in keep],
                        [val.mid[i] for i in keep], [val.generic[i] for i in keep],
                        val.split[keep], [val.ids[i] for i in keep])
    report = ev.traversal_report(params, val)
    radii = ev.hierarchy_radius_report(params, val)
    out = _out_dir(args)
    lines = [f"{val.ids[i]}\t{'ok' if report.ordered[i] else 'no'}\t" + " > ".join(path)
             for i, path in enumerate(report.paths)]
    (out / "traversal.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    ev.write_result(out / "traversal.json", "traverse",
                    {"fraction_ordered": report.fraction_ordered,
                     "fraction_own_captions": report.fraction_own, "radii": radii,
                     "radii_ordered": ev.hierarchy_ordered(radii)},
                    str(params.checksum())[:16], args.checkpoint)
    plotting.plot_radii(radii, out / "radii.png")
    _emit([{"fraction_ordered": report.fraction_ordered, "fraction_own": report.fraction_own,
            **radii}], ["fraction_ordered", "fraction_own", "generic", "mid", "specific", "image"])
    return 0


def cmd_ablate_mask(args) -> int:
    teacher = _teacher(args.teacher) if args.teacher else None
    train, val = _corpus(args)
    out = _out_dir(args)
    ratios = [float(r) for r in args.ratios.split(",")]
    rows = []
    for ratio in ratios:
        config = _config(args, mask_ratio=ratio, mode="hmid" if teacher else "meru")
        result = train_loop(config, train, teacher, out_dir=out / f"mask_{ratio:g}", val=None)
        recall = ev.mean_recall_at_1(ev.retrieval_recall(result.params, val.images, val.specific))
        probe = np.repeat(val.images, max(1, 256 // max(1, len(val))) + 1, axis=0)[:256]
        rows.append({"mask_ratio": ratio, "recall_at_1": recall,
                     "images_per_sec": ev.image_throughput(result.params, probe, ratio),
                     "config_hash": config_hash(config)})
    cols = ["mask_ratio", "recall_at_1", "images_per_sec", "config_hash"]
    _write_tsv(out / "ablate_mask.tsv", rows, cols)
    plotting.plot_mask_ablation(rows, out / "ablate_mask.png")
    _emit(rows, cols)
    return 0


LOSS_GRID = [
    ("contrastive", 0.0, 0.0),
    ("contrastive+entailment", 0.0, 0.2),
    ("contrastive+distillation", 1.0, 0.0),
    ("contrastive+entailment+distillation", 1.0, 0.2),
]


def cmd_ablate_loss(args) -> int:
    teacher = _teacher(args.teacher)
    train, val = _corpus(args)
    out = _out_dir(args)
    rows = []
    for label, lam_d, lam_e in LOSS_GRID:
        config = _config(args, lambda_distill=lam_d, lambda_entail=lam_e)
        result = train_loop(config, train, teacher, out_dir=out / label.replace("+", "_"), val=None)
        recall = ev.mean_recall_at_1(ev.retrieval_recall(result.params, val.images, val.specific))
        rows.append({"label": label, "contrastive": "yes", "entailment": "yes" if lam_e else "no",
                     "distillation": "yes" if lam_d else "no", "recall_at_1": recall,
                     "config_hash": config_hash(config)})
    cols = ["label", "contrastive", "entailment", "distillation", "recall_at_1", "config_hash"]
    _write_tsv(out / "ablate_loss.tsv", rows, cols)
    plotting.plot_loss_ablation(rows, out / "ablate_loss.png")
    _emit(rows, cols)
    return 0


def cmd_grad_check(args) -> int:
    checks = run_all(args.seed)
    rows = [{"check": c.name, "rel_error": f"{c.error:.3e}", "ok": "pass" if c.ok else "FAIL"}
            for c in checks]
    if args.out:
        out = _out_dir(args)
        _write_tsv(out / "grad_check.tsv", rows, ["check", "rel_error", "ok"])
    _emit(rows, ["check", "rel_error", "ok"])
    failed = [c.name for c in checks if not c.ok]
    if failed:
        raise CliError("gradcheck", f"{len(failed)} check(s) above 1e-4: {','.join(failed)}")
    return 0


# -- parser ------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hmid", description="Hyperbolic masked image distillation.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, *groups, help_text=""):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default=".")
        for g in groups:
            g(p)
        return p

    def data(p):
        p.add_argument("--data")

    def training(p):
        p.add_argument("--config")
        p.add_argument("--iters", type=int)
        p.add_argument("--batch", type=int)
        p.add_argument("--mask-ratio", type=float)
        p.add_argument("--lambda-distill", type=float)
        p.add_argument("--lambda-entail", type=float)
        p.add_argument("--lambda-hierarchy", type=float,
                       help="weight of the generic>mid>specific caption cones (0 = off)")

    def teacher(p):
        p.add_argument("--teacher")

    def checkpoint(p):
        p.add_argument("--checkpoint")

    g = add("gen-data", cmd_gen_data, help_text="write a synthetic corpus")
    g.add_argument("--n", type=int, default=2000)
    g.add_argument("--image-size", type=int, default=32)
    t = add("train-teacher", cmd_train_teacher, data, training, help_text="pretrain a 2x teacher")
    t.add_argument("--no-gate", action="store_true", help="skip the recall@1 >= 0.9 gate")
    add("distill", cmd_distill, data, training, teacher, help_text="train a distilled student")
    add("train-meru", cmd_train_meru, data, training, help_text="student without distillation")
    add("train-clip-baseline", cmd_train_clip, data, training, help_text="Euclidean CLIP baseline")
    c = add("eval-classify", cmd_eval_classify, data, checkpoint, help_text="zero-shot classification")
    c.add_argument("--level", choices=["specific", "mid"], default="mid")
    add("eval-retrieve", cmd_eval_retrieve, data, checkpoint, help_text="retrieval recall@k")
    tr = add("traverse", cmd_traverse, data, checkpoint, help_text="geodesic traversal to the root")
    tr.add_argument("--limit", type=int, default=0)
    m = add("ablate-mask", cmd_ablate_mask, data, training, teacher, help_text="mask ratio sweep")
    m.add_argument("--ratios", default="0,0.25,0.5,0.75")
    add("ablate-loss", cmd_ablate_loss, data, training, teacher, help_text="loss combination grid")
    add("grad-check", cmd_grad_check, help_text="finite-difference gradient checks")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 with usage on bad flags
    try:
        _setup_logging()
        return args.func(args)
    except CliError as exc:
        _fail(exc.kind, str(exc))
        return exc.code
    except ConfigError as exc:
        _fail("config", str(exc), exc.line)
        return EXIT_CONFIG
    except (TrainingError, OSError, ValueError) as exc:
        _fail(type(exc).__name__, str(exc))
        return EXIT_FAILURE


def _fail(kind: str, message: str, line: int | None = None) -> None:
    parts = ["error", f"kind={kind}"]
    if line is not None:
        parts.append(f"line={line}")
    parts.append("message=" + json.dumps(message.replace("\n", " ")))
    print("\t".join(parts), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
