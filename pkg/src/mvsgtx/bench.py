"""Benchmark driver: config parsing, trial orchestration, report emission.

Config files are line-oriented ``key=value`` text; ``#`` starts a comment
and the last occurrence of a key wins, so override lines can simply be
appended. Keys:

    engine          oze-central | oze-decentral | occ | d2pl
    workload        bomb-static | bomb-dynamic | ycsb-a | script
    mode            one-shot | interactive          (default one-shot)
    delay_us        per-operation think time in interactive mode (default 1000)
    threads         worker threads for ycsb-a       (default 4)
    threads.<KIND>  extra threads for one kind of the manufacturing
                    workload, e.g. threads.S1=2     (default 1 per kind)
    validators      parallel-validation fan-out, decentralized engine only
    duration_s      seconds per trial               (default 1.0)
    seed            base seed; trial i runs with seed+i
    trials          independent repetitions         (default 1)
    oracle          auto | on | off                 (default auto)
    profile         true | false — per-phase latency timers
    out             report path (default stdout)
    format          json-lines | human | csv        (default json-lines)
    script          schedule file, required for workload=script
    bomb.preset     desk | full                     (default desk)
    bomb.<field>    sizing override, e.g. bomb.target_products=40
    ycsb.<field>    record_count, payload_bytes, ops_per_txn, theta,
                    read_fraction

``auto`` enables history recording and the serializability check when the
run is small enough to certify: duration at most 2 s and the key space at
most 1,000 products (manufacturing) or 1,024 records (key-value); script
runs are always checked.

Reports carry per-kind transaction metrics, the long-transaction success
rate over trials, cycle-check graph-size statistics, and per-phase latency
shares (zero unless profiling was on). The json-lines form is one JSON
object per line typed ``run`` / ``config`` / ``kind`` / ``summary`` /
``oracle`` and parses back losslessly; the csv form is one row per kind
with the summary columns repeated.
"""
from __future__ import annotations

import csv
import io
import json
import time
import traceback
from dataclasses import dataclass, field, replace
from typing import Optional

from . import __version__
from .bomb import DYNAMIC_KINDS, STATIC_KINDS, BombParams
from .bomb import load as load_bomb
from .bomb import run_bomb
from .engine import make_engine
from .oracle import History, InvalidHistory, check_mvsr
from .storage import Database
from .ycsb import YcsbConfig, load_ycsb, run_ycsb_a

ENGINES = ("oze-central", "oze-decentral", "occ", "d2pl")
WORKLOADS = ("bomb-static", "bomb-dynamic", "ycsb-a", "script")
MODES = ("one-shot", "interactive")
FORMATS = ("json-lines", "human", "csv")
ORACLE_MODES = ("auto", "on", "off")

_BOMB_FIELDS = ("factories", "product_types", "material_types",
                "raw_material_types", "material_trees_per_product",
                "material_tree_size", "raw_materials_per_leaf",
                "target_products", "target_materials")
_YCSB_INT_FIELDS = ("record_count", "payload_bytes", "ops_per_txn")
_YCSB_FLOAT_FIELDS = ("theta", "read_fraction")

ORACLE_MAX_DURATION_S = 2.0
ORACLE_MAX_PRODUCTS = 1_000
ORACLE_MAX_RECORDS = 1_024
PERMUTATION_AGREEMENT_BOUND = 12


class ConfigError(Exception):
    def __init__(self, message: str, line: Optional[int] = None) -> None:
        super().__init__(f"line {line}: {message}" if line else message)
        self.line = line


@dataclass
class RunConfig:
    engine: str
    workload: str
    mode: str = "one-shot"
    delay_us: int = 1000
    threads: int = 4
    thread_plan: dict = field(default_factory=dict)
    validators: int = 1
    duration_s: float = 1.0
    seed: int = 1
    trials: int = 1
    oracle: str = "auto"
    profile: bool = False
    out: Optional[str] = None
    format: str = "json-lines"
    script: Optional[str] = None
    bomb_preset: str = "desk"
    bomb_overrides: dict = field(default_factory=dict)
    ycsb_overrides: dict = field(default_factory=dict)

    def bomb_params(self) -> BombParams:
        if self.bomb_preset == "desk":
            return BombParams.desk(**self.bomb_overrides)
        return BombParams(**self.bomb_overrides)

    def ycsb_config(self) -> YcsbConfig:
        return YcsbConfig(**self.ycsb_overrides)

    def oracle_enabled(self) -> bool:
        if self.oracle != "auto":
            return self.oracle == "on"
        if self.workload == "script":
            return True
        if self.duration_s > ORACLE_MAX_DURATION_S:
            return False
        if self.workload == "ycsb-a":
            return self.ycsb_config().record_count <= ORACLE_MAX_RECORDS
        return self.bomb_params().product_types <= ORACLE_MAX_PRODUCTS


def _parse_int(value: str, key: str, n: int, minimum: Optional[int] = None):
    try:
        out = int(value)
    except ValueError:
        raise ConfigError(f"{key} expects an integer, got {value!r}",
                          n) from None
    if minimum is not None and out < minimum:
        raise ConfigError(f"{key} must be at least {minimum}", n)
    return out


def _parse_float(value: str, key: str, n: int):
    try:
        return float(value)
    except ValueError:
        raise ConfigError(f"{key} expects a number, got {value!r}",
                          n) from None


def _parse_bool(value: str, key: str, n: int):
    if value in ("true", "false"):
        return value == "true"
    raise ConfigError(f"{key} expects true or false, got {value!r}", n)


def _parse_choice(value: str, key: str, n: int, choices: tuple):
    if value not in choices:
        raise ConfigError(
            f"{key} must be one of {', '.join(choices)}; got {value!r}", n)
    return value


def parse_config(text: str) -> RunConfig:
    """Parse config text; later lines override earlier ones."""
    values: dict = {"thread_plan": {}, "bomb_overrides": {},
                    "ycsb_overrides": {}}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("expected key=value", n)
        key, _, value = (part.strip() for part in line.partition("="))
        if not key or not value:
            raise ConfigError("expected key=value", n)
        if key == "engine":
            values[key] = _parse_choice(value, key, n, ENGINES)
        elif key == "workload":
            values[key] = _parse_choice(value, key, n, WORKLOADS)
        elif key == "mode":
            values[key] = _parse_choice(value, key, n, MODES)
        elif key == "delay_us":
            values[key] = _parse_int(value, key, n, minimum=0)
        elif key == "threads":
            values[key] = _parse_int(value, key, n, minimum=1)
        elif key.startswith("threads."):
            kind = key.split(".", 1)[1]
            if kind not in DYNAMIC_KINDS:
                raise ConfigError(f"unknown transaction kind {kind!r}", n)
            values["thread_plan"][kind] = _parse_int(value, key, n,
                                                     minimum=1)
        elif key == "validators":
            values[key] = _parse_int(value, key, n, minimum=1)
        elif key == "duration_s":
            out = _parse_float(value, key, n)
            if out <= 0:
                raise ConfigError("duration_s must be positive", n)
            values[key] = out
        elif key == "seed":
            values[key] = _parse_int(value, key, n)
        elif key == "trials":
            values[key] = _parse_int(value, key, n, minimum=1)
        elif key == "oracle":
            values[key] = _parse_choice(value, key, n, ORACLE_MODES)
        elif key == "profile":
            values[key] = _parse_bool(value, key, n)
        elif key == "out":
            values[key] = value
        elif key == "format":
            values[key] = _parse_choice(value, key, n, FORMATS)
        elif key == "script":
            values[key] = value
        elif key == "bomb.preset":
            values["bomb_preset"] = _parse_choice(value, key, n,
                                                  ("desk", "full"))
        elif key.startswith("bomb."):
            name = key.split(".", 1)[1]
            if name not in _BOMB_FIELDS:
                raise ConfigError(f"unknown key {key!r}", n)
            values["bomb_overrides"][name] = _parse_int(value, key, n,
                                                        minimum=1)
        elif key.startswith("ycsb."):
            name = key.split(".", 1)[1]
            if name in _YCSB_INT_FIELDS:
                values["ycsb_overrides"][name] = _parse_int(value, key, n,
                                                            minimum=1)
            elif name in _YCSB_FLOAT_FIELDS:
                values["ycsb_overrides"][name] = _parse_float(value, key, n)
            else:
                raise ConfigError(f"unknown key {key!r}", n)
        else:
            raise ConfigError(f"unknown key {key!r}", n)
    for required in ("engine", "workload"):
        if required not in values:
            raise ConfigError(f"missing required key {required!r}")
    config = RunConfig(**values)
    if config.workload == "script" and config.script is None:
        raise ConfigError("workload=script requires a script= path")
    if config.workload == "bomb-static":
        for kind in config.thread_plan:
            if kind not in STATIC_KINDS:
                raise ConfigError(
                    f"threads.{kind} is not a static-mode kind")
    try:
        if config.workload.startswith("bomb"):
            config.bomb_params()
        elif config.workload == "ycsb-a":
            config.ycsb_config()
    except ValueError as e:
        raise ConfigError(str(e)) from None
    return config


def emit_config(config: RunConfig) -> str:
    """Render a config as parseable text; parse(emit(c)) == c."""
    lines = [f"engine={config.engine}", f"workload={config.workload}",
             f"mode={config.mode}", f"delay_us={config.delay_us}",
             f"threads={config.threads}"]
    for kind in sorted(config.thread_plan):
        lines.append(f"threads.{kind}={config.thread_plan[kind]}")
    lines += [f"validators={config.validators}",
              f"duration_s={config.duration_s!r}", f"seed={config.seed}",
              f"trials={config.trials}", f"oracle={config.oracle}",
              f"profile={'true' if config.profile else 'false'}"]
    if config.out is not None:
        lines.append(f"out={config.out}")
    lines.append(f"format={config.format}")
    if config.script is not None:
        lines.append(f"script={config.script}")
    lines.append(f"bomb.preset={config.bomb_preset}")
    for name in sorted(config.bomb_overrides):
        lines.append(f"bomb.{name}={config.bomb_overrides[name]}")
    for name in sorted(config.ycsb_overrides):
        lines.append(f"ycsb.{name}={config.ycsb_overrides[name]!r}"
                     if isinstance(config.ycsb_overrides[name], float)
                     else f"ycsb.{name}={config.ycsb_overrides[name]}")
    return "\n".join(lines) + "\n"


@dataclass
class Report:
    config: dict
    engine_version: str
    duration_s: float
    trials: int
    kinds: dict
    l1_success_rate: Optional[float]
    graph_nodes_mean: float
    graph_nodes_max: int
    phase_shares: dict
    oracle: dict
    failed: bool = False
    error: Optional[str] = None


class _KindTally:
    __slots__ = ("commits", "aborts", "latency_ns", "max_latency_ns")

    def __init__(self) -> None:
        self.commits = 0
        self.aborts = 0
        self.latency_ns = 0
        self.max_latency_ns = 0

    def add(self, commits: int, aborts: int, latency_ns: int,
            max_latency_ns: int) -> None:
        self.commits += commits
        self.aborts += aborts
        self.latency_ns += latency_ns
        if max_latency_ns > self.max_latency_ns:
            self.max_latency_ns = max_latency_ns


def _build_engine(config: RunConfig, db: Database):
    if config.engine == "oze-decentral":
        return make_engine(config.engine, db, validators=config.validators)
    return make_engine(config.engine, db)


def _run_trial(config: RunConfig, seed: int, tallies: dict,
               script_text: Optional[str]):
    """One independent run; returns (stats snapshot, oracle findings,
    l1 committed flag, elapsed seconds)."""
    db = Database()
    engine = _build_engine(config, db)
    engine.stats.profile = config.profile
    checking = config.oracle_enabled()
    if checking and config.workload != "script":
        engine.history = History()
    delay = config.delay_us if config.mode == "interactive" else 0
    l1_ok = None
    started = time.monotonic()
    try:
        if config.workload.startswith("bomb"):
            data = load_bomb(db, config.bomb_params(), seed)
            if hasattr(engine, "start_gc"):
                engine.start_gc()
            metrics = run_bomb(engine, data,
                               config.workload.removeprefix("bomb-"),
                               config.duration_s, seed=seed,
                               thread_plan=config.thread_plan,
                               delay_us=delay)
            for kind, m in metrics.kinds.items():
                tallies.setdefault(kind, _KindTally()).add(
                    m.commits, m.aborts, m.latency_ns, m.max_latency_ns)
            l1_ok = metrics.kinds["L1"].commits >= 1
        elif config.workload == "ycsb-a":
            load_ycsb(db, config.ycsb_config(), seed)
            if hasattr(engine, "start_gc"):
                engine.start_gc()
            m = run_ycsb_a(config.ycsb_config(), engine, config.threads,
                           config.duration_s, seed=seed, delay_us=delay)
            tallies.setdefault("ycsb-a", _KindTally()).add(
                m.commits, m.aborts, m.latency_ns, m.max_latency_ns)
        else:
            from .scripted import run_scripted_schedule
            t0 = time.perf_counter_ns()
            result = run_scripted_schedule(script_text, engine)
            ns = time.perf_counter_ns() - t0
            commits = sum(o.committed for o in result.outcomes)
            tallies.setdefault("script", _KindTally()).add(
                commits, len(result.outcomes) - commits, ns, ns)
            checked, violations = 1, int(not result.verdict.serializable)
            return (engine.stats.snapshot(), (checked, violations), None,
                    time.monotonic() - started)
        checked = violations = 0
        if engine.history is not None:
            checked = 1
            verdict = check_mvsr(engine.history, mode="graph")
            if not verdict.serializable:
                violations = 1
            elif (len(verdict.witness) <= PERMUTATION_AGREEMENT_BOUND
                  and not check_mvsr(engine.history,
                                     mode="permutation").serializable):
                violations = 1
        return (engine.stats.snapshot(), (checked, violations), l1_ok,
                time.monotonic() - started)
    finally:
        engine.close()


def run_benchmark(config: RunConfig) -> Report:
    """Execute ``trials`` independent runs and aggregate one report."""
    script_text = None
    if config.workload == "script":
        with open(config.script, encoding="utf-8") as fh:
            script_text = fh.read()

    tallies: dict = {}
    stats_snapshots = []
    checked = violations = 0
    l1_successes = 0
    l1_counted = 0
    elapsed_total = 0.0
    failed, error = False, None
    for trial in range(config.trials):
        try:
            snapshot, (c, v), l1_ok, elapsed = _run_trial(
                config, config.seed + trial, tallies, script_text)
        except InvalidHistory as e:
            failed, error = True, f"trial {trial}: invalid history: {e}"
            break
        except Exception as e:  # noqa: BLE001 - report, don't crash
            failed = True
            error = (f"trial {trial}: "
                     + "".join(traceback.format_exception_only(e)).strip())
            break
        stats_snapshots.append(snapshot)
        checked += c
        violations += v
        elapsed_total += elapsed
        if l1_ok is not None:
            l1_counted += 1
            l1_successes += l1_ok

    completed = len(stats_snapshots)
    window = (config.duration_s * completed
              if config.workload != "script" else elapsed_total) or 1.0
    kinds = {}
    total_latency_ns = 0
    for kind, tally in sorted(tallies.items()):
        total = tally.commits + tally.aborts
        total_latency_ns += tally.latency_ns
        kinds[kind] = {
            "commits": tally.commits,
            "aborts": tally.aborts,
            "abort_rate": round(tally.aborts / total if total else 0.0, 6),
            "throughput_per_s": round(tally.commits / window, 6),
            "mean_latency_ms": round(
                tally.latency_ns / total / 1e6 if total else 0.0, 6),
            "max_latency_ms": round(tally.max_latency_ns / 1e6, 6),
        }

    cycle_checks = sum(s["cycle_checks"] for s in stats_snapshots)
    cycle_nodes = sum(s["cycle_check_nodes"] for s in stats_snapshots)
    graph_mean = cycle_nodes / cycle_checks if cycle_checks else 0.0
    graph_max = max((s["cycle_check_max"] for s in stats_snapshots),
                    default=0)

    shares = {"read": 0.0, "ordering": 0.0, "propagation": 0.0,
              "other": 0.0}
    if config.profile and total_latency_ns:
        for phase in ("read", "ordering", "propagation"):
            shares[phase] = round(
                min(sum(s[f"{phase}_ns"] for s in stats_snapshots)
                    / total_latency_ns, 1.0), 6)
        shares["other"] = round(
            max(1.0 - shares["read"] - shares["ordering"]
                - shares["propagation"], 0.0), 6)

    return Report(
        config={k: v for k, v in
                (line.split("=", 1) for line in
                 emit_config(config).splitlines())},
        engine_version=__version__,
        duration_s=config.duration_s,
        trials=config.trials,
        kinds=kinds,
        l1_success_rate=(round(l1_successes / l1_counted, 6)
                         if l1_counted else None),
        graph_nodes_mean=round(graph_mean, 6),
        graph_nodes_max=graph_max,
        phase_shares=shares,
        oracle={"enabled": config.oracle_enabled(), "checked": checked,
                "violations": violations},
        failed=failed,
        error=error,
    )


# -- emission ---------------------------------------------------------------

CSV_COLUMNS = (
    "kind", "commits", "aborts", "abort_rate", "throughput_per_s",
    "mean_latency_ms", "max_latency_ms", "l1_success_rate",
    "graph_nodes_mean", "graph_nodes_max", "read_share", "ordering_share",
    "propagation_share", "other_share", "oracle_enabled", "oracle_checked",
    "oracle_violations", "failed",
)


def emit_report(report: Report, fmt: Optional[str] = None) -> bytes:
    fmt = fmt or "json-lines"
    if fmt == "json-lines":
        return _emit_json_lines(report)
    if fmt == "csv":
        return _emit_csv(report)
    if fmt == "human":
        return _emit_human(report)
    raise ValueError(f"unknown report format: {fmt}")


def _emit_json_lines(report: Report) -> bytes:
    lines = [
        {"type": "run", "engine_version": report.engine_version,
         "duration_s": report.duration_s, "trials": report.trials,
         "failed": report.failed, "error": report.error},
        {"type": "config", **report.config},
    ]
    for kind, metrics in report.kinds.items():
        lines.append({"type": "kind", "name": kind, **metrics})
    lines.append({"type": "summary",
                  "l1_success_rate": report.l1_success_rate,
                  "graph_nodes_mean": report.graph_nodes_mean,
                  "graph_nodes_max": report.graph_nodes_max,
                  "phase_shares": report.phase_shares})
    lines.append({"type": "oracle", **report.oracle})
    return ("\n".join(json.dumps(line, sort_keys=True) for line in lines)
            + "\n").encode()


def parse_report(data: bytes) -> Report:
    """Rebuild a Report from its json-lines form (round-trip inverse)."""
    run = config = summary = oracle = None
    kinds = {}
    for n, raw in enumerate(data.decode().splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
            tag = obj.pop("type")
        except (json.JSONDecodeError, KeyError) as e:
            raise ValueError(f"report line {n}: {e}") from None
        if tag == "run":
            run = obj
        elif tag == "config":
            config = obj
        elif tag == "kind":
            kinds[obj.pop("name")] = obj
        elif tag == "summary":
            summary = obj
        elif tag == "oracle":
            oracle = obj
        else:
            raise ValueError(f"report line {n}: unknown type {tag!r}")
    if None in (run, config, summary, oracle):
        raise ValueError("report is missing required lines")
    return Report(config=config, engine_version=run["engine_version"],
                  duration_s=run["duration_s"], trials=run["trials"],
                  kinds=kinds, l1_success_rate=summary["l1_success_rate"],
                  graph_nodes_mean=summary["graph_nodes_mean"],
                  graph_nodes_max=summary["graph_nodes_max"],
                  phase_shares=summary["phase_shares"], oracle=oracle,
                  failed=run["failed"], error=run["error"])


def _emit_csv(report: Report) -> bytes:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(CSV_COLUMNS)
    shared = (
        "" if report.l1_success_rate is None else report.l1_success_rate,
        report.graph_nodes_mean, report.graph_nodes_max,
        report.phase_shares["read"], report.phase_shares["ordering"],
        report.phase_shares["propagation"], report.phase_shares["other"],
        report.oracle["enabled"], report.oracle["checked"],
        report.oracle["violations"], report.failed,
    )
    for kind, m in report.kinds.items():
        writer.writerow((kind, m["commits"], m["aborts"], m["abort_rate"],
                         m["throughput_per_s"], m["mean_latency_ms"],
                         m["max_latency_ms"]) + shared)
    return buf.getvalue().encode()


def _emit_human(report: Report) -> bytes:
    out = [f"engine {report.config['engine']}"
           f"  workload {report.config['workload']}"
           f"  trials {report.trials}  duration {report.duration_s}s"
           f"  version {report.engine_version}"]
    if report.failed:
        out.append(f"FAILED: {report.error}")
    header = (f"{'kind':<8} {'commits':>9} {'aborts':>9} {'abort%':>8} "
              f"{'tx/s':>10} {'mean ms':>9} {'max ms':>9}")
    out += [header, "-" * len(header)]
    for kind, m in report.kinds.items():
        out.append(f"{kind:<8} {m['commits']:>9} {m['aborts']:>9} "
                   f"{m['abort_rate'] * 100:>7.2f}% "
                   f"{m['throughput_per_s']:>10.2f} "
                   f"{m['mean_latency_ms']:>9.3f} "
                   f"{m['max_latency_ms']:>9.3f}")
    if report.l1_success_rate is not None:
        out.append(f"L1 success rate: {report.l1_success_rate:.3f}")
    out.append(f"graph nodes: mean {report.graph_nodes_mean:.1f}, "
               f"max {report.graph_nodes_max}")
    s = report.phase_shares
    out.append(f"phase shares: read {s['read']:.3f}, "
               f"ordering {s['ordering']:.3f}, "
               f"propagation {s['propagation']:.3f}, other {s['other']:.3f}")
    o = report.oracle
    out.append(f"oracle: enabled={o['enabled']} checked={o['checked']} "
               f"violations={o['violations']}")
    return ("\n".join(out) + "\n").encode()
