"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 missing or
invalid data. BLAS thread pools are capped before numpy loads so results
do not depend on the machine's core count; ``--threads`` controls the
pipeline's own worker pools without changing results.
"""
import os
import sys

for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import json


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="ctabd",
        description="Synthetic-phantom CT organ segmentation and measurement pipeline.",
    )
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True
    commands = [
        ("gen-phantoms", "generate synthetic phantoms with analytic truth"),
        ("preprocess", "resample and normalize volumes"),
        ("train-seg", "train the segmentation network"),
        ("segment", "run sliding-window segmentation on the eval split"),
        ("postprocess", "remove small connected components"),
        ("train-measure", "train the region-proposal measurement network"),
        ("measure", "run learned measurement on the eval split"),
        ("evaluate", "compute metrics and emit report.json / roc.csv"),
        ("run-all", "run every stage in order"),
    ]
    for name, help_text in commands:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", metavar="FILE", help="pipeline config JSON")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--threads", type=int, default=1, help="worker cap (results unchanged)")
        p.add_argument("--out", metavar="DIR", help="override the output directory")
        p.add_argument("--progress", action="store_true", help="machine-readable progress JSON lines on stderr")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)

    from .errors import ConfigError, FormatError, MaskValidationError, MissingInputError, ParameterError
    from .config import load_config
    from .pipeline import Pipeline

    def progress(event: dict):
        print(json.dumps(event, sort_keys=True), file=sys.stderr)

    try:
        cfg = load_config(args.config, seed=args.seed, out_dir=args.out)
    except FileNotFoundError as exc:
        print(f"ctabd: config file not found: {exc.filename or exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"ctabd: {exc}", file=sys.stderr)
        return 1

    pipe = Pipeline(cfg, threads=args.threads, progress=progress if args.progress else None)
    try:
        pipe.run_stage(args.command)
    except MissingInputError as exc:
        print(f"ctabd: {exc}", file=sys.stderr)
        return 2
    except (FormatError, MaskValidationError) as exc:
        print(f"ctabd: invalid data: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"ctabd: missing file: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ParameterError) as exc:
        print(f"ctabd: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
