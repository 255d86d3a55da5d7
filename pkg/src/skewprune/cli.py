"""Command-line front end: ``skewprune <subcommand> [flags]``.

Exit codes: 0 success, 1 usage or config error, 2 data/model error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import pipeline as P
from .cost import cost_report
from .data import (generate_synthetic, load_dataset, load_model, read_predictions,
                   save_model, write_predictions)
from .fairness import evaluation_document
from .models import ModelSpec, VGGConfig, VitConfig, build_vgg, build_vit
from .skew import load_reports, save_reports
from .trainer import TrainingDiverged, finetune

log = logging.getLogger("skewprune")

EVAL_SCHEMA = "skewprune.eval/1"
COST_SCHEMA = "skewprune.cost/1"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p: argparse.ArgumentParser, *names: str) -> None:
    flags = {
        "config": dict(type=Path, help="JSON run config"),
        "seed": dict(type=int, help="override the config seed"),
        "model": dict(type=Path, help="model directory"),
        "data": dict(type=Path, help="dataset directory"),
        "arch": dict(choices=["vgg", "vit"]),
        "mode": dict(choices=["strict", "block"]),
        "pattern": dict(type=int, choices=range(1, 7), metavar="{1..6}"),
    }
    for n in names:
        p.add_argument(f"--{n}", **flags[n])


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="skewprune", description="Skewness-guided pruning for fairer classifiers.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser, metavar="subcommand")
    sub.required = True

    p = sub.add_parser("synth", help="generate a synthetic biased dataset")
    _common(p, "config", "seed")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("train", help="train a vanilla model")
    _common(p, "config", "seed", "data", "arch")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("analyze", help="per-unit activation skewness")
    _common(p, "config", "model", "data")
    p.add_argument("--split", help="dataset split (default: config analyze_split)")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("prune", help="structural pruning (CNN mode or ViT pattern)")
    _common(p, "config", "seed", "model", "data", "mode", "pattern")
    p.add_argument("--report", type=Path, help="skewness report from analyze (VGG only)")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("finetune", help="fine-tune a pruned model")
    _common(p, "config", "seed", "model", "data")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("eval", help="predictions, fairness and performance")
    _common(p, "config", "model", "data")
    p.add_argument("--split", help="dataset split (default: config eval_split)")
    p.add_argument("--predictions", type=Path, help="score an existing predictions file instead")
    p.add_argument("--num-classes", type=int)
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("cost", help="parameter, FLOP and memory figures")
    _common(p, "model")
    p.add_argument("--preset", choices=["vgg11", "vit-b16"], help="standard architecture instead of a file")
    p.add_argument("--num-classes", type=int, default=8)
    p.add_argument("--input-shape", help="C,H,W (default: the model's own)")
    p.add_argument("--out", type=Path)

    p = sub.add_parser("report", help="merge eval and cost outputs into one table")
    p.add_argument("--entry", nargs=3, action="append", required=True, metavar=("LABEL", "EVAL", "COST"),
                   help="column label, eval.json, cost.json (repeatable)")
    p.add_argument("--out", type=Path)
    return ap


# ---------------------------------------------------------------- helpers

def _config(args) -> P.RunConfig:
    cfg = P.RunConfig.load(args.config) if getattr(args, "config", None) else P.RunConfig()
    return cfg.replace(seed=getattr(args, "seed", None), arch=getattr(args, "arch", None),
                       mode=getattr(args, "mode", None), pattern=getattr(args, "pattern", None))


def _check_inputs(args) -> None:
    ins = []
    for name in ("config", "model", "data", "report", "predictions"):
        path = getattr(args, name, None)
        if path is not None:
            if not path.exists():
                raise UsageError(f"--{name}: {path} does not exist")
            ins.append(path.resolve())
    for label, ev, co in getattr(args, "entry", None) or []:
        for path in (Path(ev), Path(co)):
            if not path.exists():
                raise UsageError(f"--entry {label}: {path} does not exist")
            ins.append(path.resolve())
    out = getattr(args, "out", None)
    if out is not None and out.resolve() in ins:
        raise UsageError("--out must not overwrite an input")


def _require(args, *names: str) -> None:
    missing = [n for n in names if getattr(args, n, None) is None]
    if missing:
        raise UsageError(f"{args.command} needs " + ", ".join(f"--{n}" for n in missing))


def _write_json(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _split(args, split: str):
    samples = load_dataset(args.data, split)
    if not samples:
        raise ValueError(f"{args.data}: split {split!r} is empty")
    return P.arrays(samples)


def _num_classes(data: Path) -> int:
    doc = json.loads((data / "manifest.json").read_text())
    return int(doc["num_classes"])


# ---------------------------------------------------------------- subcommands

def cmd_synth(args) -> None:
    cfg = _config(args)
    generate_synthetic(cfg.synth_config(), args.out)


def cmd_train(args) -> None:
    _require(args, "data")
    cfg = _config(args)
    tr, va = _split(args, "train"), _split(args, "val")
    model, tlog = P.train_model(cfg, tr, va, _num_classes(args.data))
    save_model(model, args.out)
    tlog.save(args.out / "trainlog.json")


def cmd_analyze(args) -> None:
    _require(args, "model", "data")
    cfg = _config(args)
    model = load_model(args.model)
    x = _split(args, args.split or cfg.analyze_split)[0]
    save_reports(P.analyze(model, x, cfg.batch_size), args.out)


def cmd_prune(args) -> None:
    _require(args, "model")
    model = load_model(args.model)
    cfg = _config(args).replace(arch=model.arch)
    if model.arch == "vgg":
        if args.report is None and args.data is None:
            raise UsageError("prune needs --report or --data for a VGG model")
        reports = load_reports(args.report) if args.report is not None else None
        images = _split(args, cfg.analyze_split)[0] if reports is None else None
        pruned, _ = P.prune(cfg, model, images, reports)
    else:
        needs_data = cfg.pattern != 1
        if needs_data and args.data is None:
            raise UsageError(f"pattern {cfg.pattern} needs --data")
        images, interim = None, None
        if needs_data:
            images = _split(args, cfg.analyze_split)[0]
            if P.PATTERNS[cfg.pattern].fine_tune == "partial":
                interim = (_split(args, "train"), _split(args, "val"))
        pruned, _ = P.prune(cfg, model, images, interim_data=interim)
    save_model(pruned, args.out)


def cmd_finetune(args) -> None:
    _require(args, "model", "data")
    cfg = _config(args)
    model = load_model(args.model)
    tr, va = _split(args, "train"), _split(args, "val")
    tcfg = cfg.replace(arch=model.arch).train_config("finetune")
    tuned, tlog = finetune(model, tr[:2], va[:2], tcfg)
    tuned.meta["best_epoch"] = tlog.best_epoch
    save_model(tuned, args.out)
    tlog.save(args.out / "trainlog.json")


def cmd_eval(args) -> None:
    cfg = _config(args)
    if args.predictions is not None:
        records = read_predictions(args.predictions)
        k = args.num_classes or max(max(r.true, r.pred) for r in records) + 1
    else:
        _require(args, "model", "data")
        model = load_model(args.model)
        records = P.predictions(model, _split(args, args.split or cfg.eval_split), cfg.batch_size)
        k = model.num_classes
    args.out.mkdir(parents=True, exist_ok=True)
    write_predictions(records, args.out / "predictions.csv")
    _write_json(args.out / "eval.json", evaluation_document(records, k))


def _preset(name: str, num_classes: int) -> ModelSpec:
    if name == "vgg11":
        return build_vgg(VGGConfig.vgg11(num_classes), materialize=False)
    return build_vit(VitConfig.vit_b16(num_classes), materialize=False)


def cmd_cost(args) -> None:
    if (args.model is None) == (args.preset is None):
        raise UsageError("cost needs exactly one of --model or --preset")
    if args.model is not None:
        model = load_model(args.model)
    else:
        model = _preset(args.preset, args.num_classes)
    shape = None
    if args.input_shape:
        try:
            shape = tuple(int(v) for v in args.input_shape.split(","))
        except ValueError:
            raise UsageError(f"--input-shape must be C,H,W integers, got {args.input_shape!r}")
    report = cost_report(model, shape, model.meta.get("best_epoch"))
    doc = {"schema": COST_SCHEMA, "arch": model.arch, **report.to_dict()}
    text = json.dumps(doc, indent=1, sort_keys=True) + "\n"
    if args.out is not None:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(text)
    sys.stdout.write(text)


REPORT_ROWS = [
    ("Performance", [("Accuracy", "performance", "accuracy", "{:.4f}"),
                     ("Precision", "performance", "precision", "{:.4f}"),
                     ("Recall", "performance", "recall", "{:.4f}"),
                     ("F1-score", "performance", "f1", "{:.4f}")]),
    ("Fairness", [("EOpp0", "fairness", "eopp0", "{:.4f}"),
                  ("EOpp1", "fairness", "eopp1", "{:.4f}"),
                  ("EOdd", "fairness", "eodd", "{:.4f}")]),
    ("Computational Cost", [("FLOPs (G)", "cost", "gflops", "{:.4g}"),
                            ("Parameters (M)", "cost", "params_m", "{:.4g}"),
                            ("Memory (MiB)", "cost", "memory_mib", "{:.2f}"),
                            ("Best epoch", "cost", "best_epoch", "{}")]),
]


def _load_doc(path, schema: str) -> dict:
    doc = json.loads(Path(path).read_text())
    if doc.get("schema") != schema:
        raise ValueError(f"{path}: expected schema {schema}, found {doc.get('schema')!r}")
    return doc


def render_report(entries: list[tuple[str, dict, dict]]) -> str:
    labels = [e[0] for e in entries]
    width = max(12, *(len(l) for l in labels))
    lines = [f"{'':<18}" + "".join(f"{l:>{width + 2}}" for l in labels)]
    for section, rows in REPORT_ROWS:
        lines.append(section)
        for name, src, key, fmt in rows:
            cells = []
            for _, ev, co in entries:
                val = co.get(key) if src == "cost" else ev[src].get(key)
                cells.append("-" if val is None else fmt.format(val))
            lines.append(f"  {name:<16}" + "".join(f"{c:>{width + 2}}" for c in cells))
    return "\n".join(lines) + "\n"


def cmd_report(args) -> None:
    entries = [(label, _load_doc(ev, EVAL_SCHEMA), _load_doc(co, COST_SCHEMA))
               for label, ev, co in args.entry]
    text = render_report(entries)
    if args.out is not None:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(text)
    sys.stdout.write(text)


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "analyze": cmd_analyze, "prune": cmd_prune,
            "finetune": cmd_finetune, "eval": cmd_eval, "cost": cmd_cost, "report": cmd_report}


def _thread_limit():
    raw = os.environ.get("SKEWPRUNE_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"SKEWPRUNE_THREADS must be a positive integer, got {raw!r}")
    if n < 1:
        raise UsageError(f"SKEWPRUNE_THREADS must be a positive integer, got {raw!r}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"skewprune: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:             # --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _check_inputs(args)
        limit = _thread_limit()
        try:
            COMMANDS[args.command](args)
        finally:
            if limit is not None:
                limit.restore_original_limits()
    except (UsageError, P.ConfigError) as e:
        print(f"skewprune {args.command}: {e}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, FileNotFoundError, TrainingDiverged, json.JSONDecodeError) as e:
        print(f"skewprune {args.command}: {e}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())
