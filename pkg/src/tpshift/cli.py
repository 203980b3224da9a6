"""Command line front end.

Subcommands:
  profile    build the offline latency profile and write it as CSV
  simulate   run one scenario and emit a JSON report or a timeline CSV
  compare    adaptive vs static layouts on identical draws
  sweep      compare across a list of generation caps

Exit codes: 0 success, 1 bad usage, 2 config or I/O problem, 3 scenario
validation failure.  All output is deterministic for a given config and
seed: JSON keys are sorted and floats use a fixed format.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

from .config import build_scenario, list_presets, load_config
from .engine import build_profile, compare, run
from .errors import ConfigError, ScenarioError, TraceParseError
from .latency import save_table

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_SCENARIO = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _build_parser() -> _Parser:
    parser = _Parser(prog="tpshift",
                     description="Planning simulator for adaptive tensor-"
                                 "parallel reconfiguration during generation.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True,
                       help="preset name or path to an INI config "
                            f"(presets: {', '.join(list_presets())})")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config's RNG seed")
        p.add_argument("--out", default=None,
                       help="write output to this file instead of stdout")

    p = sub.add_parser("profile", help="build and save the latency profile")
    common(p)

    p = sub.add_parser("simulate", help="run one scenario")
    common(p)
    p.add_argument("--mode", choices=("adaptive", "static", "naive-switch"),
                   default=None, help="override the config's mode")
    p.add_argument("--l-max", type=int, default=None,
                   help="override the per-sample generation cap")
    p.add_argument("--initial-tp", type=int, default=None)
    p.add_argument("--global-batch", type=int, default=None)
    p.add_argument("--format", choices=("json", "timeline"), default="json",
                   help="json report or per-event timeline CSV")

    p = sub.add_parser("compare", help="adaptive vs every static layout")
    common(p)
    p.add_argument("--l-max", type=int, default=None)
    p.add_argument("--global-batch", type=int, default=None)
    p.add_argument("--include-naive", action="store_true",
                   help="also run the restart-style switching mode")

    p = sub.add_parser("sweep", help="compare across generation caps")
    common(p)
    p.add_argument("--l-max-values", default=None,
                   help="comma-separated list overriding the config's sweep")
    p.add_argument("--workers", type=int, default=1,
                   help="sweep points evaluated in parallel")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    return parser


def _emit(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        with open(out, "w") as fh:
            fh.write(text)


def _json_text(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _timeline_text(report) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["time_s", "node", "event", "active_count", "tp", "detail"])
    for t, node, event, active, tp, detail in report.timeline_rows():
        writer.writerow([f"{t:.9f}", node, event, active, tp, detail])
    return buf.getvalue()


def _cmd_profile(args) -> int:
    cfg = load_config(args.config)
    spec = build_scenario(cfg, seed=args.seed)
    table = build_profile(spec)
    if args.out is None:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["tp", "batch", "ctx_len", "decode_ms", "prefill_ms"])
        writer.writerow(["# token_cap", table.token_cap, "", "", ""])
        for p in sorted(table.points, key=lambda p: (p.tp, p.batch, p.ctx_len)):
            writer.writerow([p.tp, p.batch, p.ctx_len,
                             f"{p.decode_latency * 1e3:.17g}",
                             f"{p.prefill_latency * 1e3:.17g}"])
        sys.stdout.write(buf.getvalue())
    else:
        save_table(table, args.out)
    return EXIT_OK


def _cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    spec = build_scenario(cfg, seed=args.seed, mode=args.mode, l_max=args.l_max,
                          initial_tp=args.initial_tp,
                          global_batch=args.global_batch)
    report = run(spec)
    if args.format == "timeline":
        _emit(_timeline_text(report), args.out)
    else:
        _emit(_json_text(report.to_json_dict()), args.out)
    return EXIT_OK


def _cmd_compare(args) -> int:
    cfg = load_config(args.config)
    spec = build_scenario(cfg, seed=args.seed, l_max=args.l_max,
                          global_batch=args.global_batch)
    report = compare(spec, include_naive=args.include_naive)
    _emit(_json_text(report.to_json_dict()), args.out)
    return EXIT_OK


def _sweep_point(payload):
    spec, l_max = payload
    rep = compare(replace(spec, l_max=l_max))
    return {
        "l_max": l_max,
        "best_static_tp": rep.best_static_tp,
        "best_static_time": rep.best_static_time,
        "adaptive_time": rep.adaptive_time,
        "speedup": rep.speedup,
        "iteration_speedup": rep.iteration_speedup,
    }


def _cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    spec = build_scenario(cfg, seed=args.seed)
    if args.l_max_values:
        try:
            values = [int(v) for v in args.l_max_values.split(",") if v.strip()]
        except ValueError:
            raise ConfigError(f"bad --l-max-values: {args.l_max_values!r}")
    else:
        values = list(cfg.sweep_l_max)
    if not values:
        raise ConfigError("sweep needs at least one l_max value")
    payloads = [(spec, v) for v in values]
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            rows = list(pool.map(_sweep_point, payloads))
    else:
        rows = [_sweep_point(p) for p in payloads]
    if args.format == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["l_max", "best_static_tp", "best_static_time",
                         "adaptive_time", "speedup", "iteration_speedup"])
        for row in rows:
            writer.writerow([row["l_max"], row["best_static_tp"],
                             f"{row['best_static_time']:.9f}",
                             f"{row['adaptive_time']:.9f}",
                             f"{row['speedup']:.9f}",
                             f"{row['iteration_speedup']:.9f}"])
        _emit(buf.getvalue(), args.out)
    else:
        _emit(_json_text({"seed": spec.seed, "points": rows}), args.out)
    return EXIT_OK


_COMMANDS = {
    "profile": _cmd_profile,
    "simulate": _cmd_simulate,
    "compare": _cmd_compare,
    "sweep": _cmd_sweep,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, TraceParseError) as exc:
        print(f"tpshift: config error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"tpshift: i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ScenarioError as exc:
        print(f"tpshift: invalid scenario: {exc}", file=sys.stderr)
        return EXIT_SCENARIO


if __name__ == "__main__":
    sys.exit(main())
