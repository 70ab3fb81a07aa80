"""Command line entry point: ``famr {train,forget,verify,report}``.

Exit codes: 0 success, 1 runtime failure, 2 config or validation failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import harness
from .harness import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, ConfigError

log = logging.getLogger("famr")


def _grid(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None
    if not vals or any(v <= 0 for v in vals):
        raise argparse.ArgumentTypeError("lambda grid values must be positive")
    return vals


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="famr", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, checkpoint=False):
        sp.add_argument("--config", required=True)
        sp.add_argument("--out", help="output directory (overrides output.dir)")
        sp.add_argument("--seed-override", type=int)
        if checkpoint:
            sp.add_argument("--checkpoint", required=True, help="baseline (theta0) checkpoint")

    common(sub.add_parser("train", help="train the baseline model"))
    common(sub.add_parser("forget", help="run anchored forgetting"), checkpoint=True)
    v = sub.add_parser("verify", help="retrain oracle and bound checks")
    common(v, checkpoint=True)
    v.add_argument("--theta-star", help="forgetting checkpoint to check alongside the grid")
    v.add_argument("--lambda-grid", type=_grid)
    r = sub.add_parser("report", help="tabulate completed runs")
    r.add_argument("result_dir")
    r.add_argument("--out")
    return p


def run(args) -> int:
    if args.command == "report":
        doc = harness.cmd_report(args.result_dir, args.out)
        print(f"{len(doc['rows'])} run(s) tabulated, {len(doc['skipped'])} skipped")
        return EXIT_OK
    exp = harness.load_config(args.config, args.seed_override, args.out)
    if args.command == "train":
        harness.cmd_train(exp)
    elif args.command == "forget":
        harness.cmd_forget(exp, args.checkpoint)
    elif args.command == "verify":
        harness.cmd_verify(exp, args.checkpoint, args.theta_star, args.lambda_grid)
    print(f"{args.command}: wrote {exp.out_dir}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # runtime failures map to exit 1
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
