"""Command line: ``metric-ood {train,eval,report,metrics}``."""

import argparse
import json
import logging
import sys
from pathlib import Path

from . import runner
from .config import load_config
from .errors import MetricOODError, UsageError
from .metrics import evaluate, read_score_csv, split_records


def _add_common(p):
    p.add_argument("--config", type=Path, help="experiment INI file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, help="run / output directory")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override, e.g. --set train.steps=500 (repeatable)")


def cmd_train(args):
    cfg = load_config(args.config, args.overrides, seed=args.seed,
                      output_dir=str(args.out) if args.out else None)
    out = Path(cfg.output_dir)
    result = runner.train(cfg, out_dir=out)
    print(json.dumps({"run": str(out), "final_loss": result.losses[-1][1],
                      "validation_accuracy": result.val_accuracy}))


def cmd_eval(args):
    run_dir = args.out
    if args.config is None:
        if run_dir is None:
            raise UsageError("eval needs --out RUN_DIR or --config")
        cfg = runner.config_from_run(run_dir, args.overrides)
    else:
        cfg = load_config(args.config, args.overrides, seed=args.seed,
                          output_dir=str(run_dir) if run_dir else None)
        run_dir = Path(cfg.output_dir)
    report = runner.evaluate_run(cfg, run_dir, checkpoint=args.checkpoint)
    print(json.dumps({"run": str(run_dir), "in_dist_accuracy": report["in_dist_accuracy"],
                      "auroc": {k: v["auroc"] for k, v in report["metrics"].items()}}))


def cmd_report(args):
    rows = runner.make_report(args.runs, args.out)
    print(json.dumps({"rows": len(rows), "out": str(args.out)}))


def cmd_metrics(args):
    in_r, out_r = split_records(read_score_csv(args.scores))
    if not in_r or not out_r:
        raise UsageError("score file needs both in- and out-distribution rows")
    report = evaluate(in_r, out_r)
    if args.json:
        Path(args.json).write_text(report.to_json())
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    sys.stdout.write(report.to_json())


def build_parser():
    parser = argparse.ArgumentParser(prog="metric-ood", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a CE / ML / ODM network")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score test-in and out-distribution sources")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="compare runs and emit PCA plot data")
    p.add_argument("runs", nargs="+", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("metrics", help="metric suite for a score CSV")
    p.add_argument("scores", type=Path)
    p.add_argument("--json", type=Path)
    p.add_argument("--csv", type=Path)
    p.set_defaults(func=cmd_metrics)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except MetricOODError as exc:
        msg = " ".join(str(exc).split())
        print(f"error: {exc.kind}: {msg}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
