"""Command-line benchmark runner.

    mvsgtx-bench --config run.conf [--override k=v ...] [--out path]
                 [--format json-lines|human|csv] [--profile]

The config file format is documented in the bench module. Overrides are
appended after the file's lines, so they win key-by-key. Exit status: 0 if
the run completed and every enabled oracle check passed, 2 if any history
failed the serializability check, 1 for operational failures (bad config,
missing files, engine errors).
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from .bench import ConfigError, emit_report, parse_config, run_benchmark

EXIT_OK = 0
EXIT_OPERATIONAL = 1
EXIT_ORACLE_VIOLATION = 2


def build_arg_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mvsgtx-bench",
        description="Run one benchmark configuration and emit a report.")
    parser.add_argument("--config", required=True,
                        help="path to a key=value config file")
    parser.add_argument("--override", action="append", default=[],
                        metavar="K=V",
                        help="config line appended after the file "
                             "(repeatable; later values win)")
    parser.add_argument("--out", help="write the report here instead of "
                                      "the config's out= (or stdout)")
    parser.add_argument("--format",
                        choices=("json-lines", "human", "csv"),
                        help="report format (overrides the config)")
    parser.add_argument("--profile", action="store_true",
                        help="enable per-phase latency timers")
    return parser


def main(argv=None) -> int:
    args = build_arg_parser().parse_args(argv)
    try:
        with open(args.config, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        print(f"mvsgtx-bench: cannot read config: {e}", file=sys.stderr)
        return EXIT_OPERATIONAL

    if args.override:
        text += "\n" + "\n".join(args.override) + "\n"
    try:
        config = parse_config(text)
    except ConfigError as e:
        print(f"mvsgtx-bench: config error: {e}", file=sys.stderr)
        return EXIT_OPERATIONAL

    if args.profile:
        config = replace(config, profile=True)
    if args.out:
        config = replace(config, out=args.out)
    if args.format:
        config = replace(config, format=args.format)

    try:
        report = run_benchmark(config)
    except OSError as e:
        print(f"mvsgtx-bench: {e}", file=sys.stderr)
        return EXIT_OPERATIONAL

    data = emit_report(report, config.format)
    if config.out:
        try:
            with open(config.out, "wb") as fh:
                fh.write(data)
        except OSError as e:
            print(f"mvsgtx-bench: cannot write report: {e}",
                  file=sys.stderr)
            return EXIT_OPERATIONAL
    else:
        sys.stdout.buffer.write(data)
        sys.stdout.buffer.flush()

    if report.failed:
        print(f"mvsgtx-bench: run failed: {report.error}", file=sys.stderr)
        return EXIT_OPERATIONAL
    if report.oracle["violations"]:
        print("mvsgtx-bench: serializability oracle violation",
              file=sys.stderr)
        return EXIT_ORACLE_VIOLATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
