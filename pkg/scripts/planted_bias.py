"""Planted-bias experiment: vanilla vs skewness-pruned + fine-tuned, over seeds.

    python scripts/planted_bias.py --arch vgg
    python scripts/planted_bias.py --arch vit --control   # no pruning, same fine-tuning budget

Writes per-seed evaluation documents to --out (JSON) and prints a summary.
"""
import argparse
import json
from pathlib import Path

from skewprune.pipeline import planted_bias


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--arch", choices=["vgg", "vit"], default="vgg")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--pattern", type=int, default=6)
    ap.add_argument("--control", action="store_true", help="keep every unit, fine-tune anyway")
    ap.add_argument("--out", type=Path)
    args = ap.parse_args()

    summary = planted_bias(args.arch, args.seeds, control=args.control, pattern=args.pattern)
    print(summary.table())
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        doc = {"arch": args.arch, "control": args.control, "pattern": args.pattern,
               "results": [r.to_dict() for r in summary.results]}
        args.out.write_text(json.dumps(doc, indent=1))


if __name__ == "__main__":
    main()
