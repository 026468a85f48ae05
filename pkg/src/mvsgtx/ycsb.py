"""Key-value read/update workload with Zipfian key skew.

Transactions run a fixed number of single-key operations over one table,
half reads and half overwrites by default. Key popularity follows a
Zipfian distribution with parameter theta: 0 is uniform, values toward 1
concentrate traffic on the lowest-numbered keys. Draws use the standard
rejection-free approximation with the harmonic normalizers precomputed
once per (record_count, theta).

As with the manufacturing workload, every random choice a transaction
makes is drawn before it starts, so re-execution replays identically.
"""
from __future__ import annotations

import random
import threading
import time
from dataclasses import dataclass

from .engine import DelayedContext, Engine, TxContext
from .storage import encode_key

USERTABLE = "usertable"


@dataclass(frozen=True)
class YcsbConfig:
    record_count: int = 100_000
    payload_bytes: int = 100
    ops_per_txn: int = 16
    theta: float = 0.0
    read_fraction: float = 0.5

    def __post_init__(self) -> None:
        if self.record_count < 1:
            raise ValueError("record_count must be at least 1")
        if self.ops_per_txn < 1:
            raise ValueError("ops_per_txn must be at least 1")
        if self.payload_bytes < 1:
            raise ValueError("payload_bytes must be at least 1")
        if not 0.0 <= self.theta < 1.0:
            raise ValueError("theta must lie in [0, 1)")
        if not 0.0 <= self.read_fraction <= 1.0:
            raise ValueError("read_fraction must lie in [0, 1]")


class ZipfianGenerator:
    """Zipfian(theta) ranks over [0, n); rank 0 is the most popular.

    Constants follow the classic quantile approximation: a uniform draw u
    lands on rank 0 or 1 via the exact head probabilities and elsewhere via
    n * (eta*u - eta + 1)^(1/(1-theta)).
    """

    __slots__ = ("n", "theta", "zetan", "alpha", "eta", "head2")

    def __init__(self, n: int, theta: float) -> None:
        self.n = n
        self.theta = theta
        self.zetan = sum(1.0 / i ** theta for i in range(1, n + 1))
        self.alpha = 1.0 / (1.0 - theta)
        denom = 1.0 - (1.0 + 0.5 ** theta) / self.zetan
        self.eta = ((1.0 - (2.0 / n) ** (1.0 - theta)) / denom
                    if denom else 0.0)   # unused when n <= 2
        self.head2 = 1.0 + 0.5 ** theta

    def next(self, rng: random.Random) -> int:
        u = rng.random()
        uz = u * self.zetan
        if uz < 1.0:
            return 0
        if uz < self.head2:
            return 1
        rank = int(self.n * (self.eta * u - self.eta + 1.0) ** self.alpha)
        return rank if rank < self.n else self.n - 1

    def probability(self, rank: int) -> float:
        """Exact Zipfian mass of one rank, for distribution checks."""
        return (1.0 / (rank + 1) ** self.theta) / self.zetan


_generators: dict[tuple[int, float], ZipfianGenerator] = {}
_generators_lock = threading.Lock()


def _generator(n: int, theta: float) -> ZipfianGenerator:
    key = (n, theta)
    gen = _generators.get(key)
    if gen is None:
        with _generators_lock:
            gen = _generators.get(key)
            if gen is None:
                gen = _generators[key] = ZipfianGenerator(n, theta)
    return gen


def next_key(rng: random.Random, config: YcsbConfig) -> int:
    return _generator(config.record_count, config.theta).next(rng)


def load_ycsb(db, config: YcsbConfig, seed: int) -> None:
    rng = random.Random(seed)
    db.create_table(USERTABLE)
    db.bulk_load(USERTABLE, ((encode_key(i), rng.randbytes(
        config.payload_bytes)) for i in range(config.record_count)))


def draw_ops(config: YcsbConfig, rng: random.Random) -> list:
    """Pre-draw one transaction's operations: (is_read, key, payload)."""
    ops = []
    for _ in range(config.ops_per_txn):
        is_read = rng.random() < config.read_fraction
        key = next_key(rng, config)
        payload = None if is_read else rng.randbytes(config.payload_bytes)
        ops.append((is_read, key, payload))
    return ops


def make_ycsb_txn(config: YcsbConfig, rng: random.Random):
    ops = draw_ops(config, rng)

    def logic(ctx: TxContext):
        hits = 0
        for is_read, key, payload in ops:
            if is_read:
                if ctx.read(USERTABLE, encode_key(key)) is not None:
                    hits += 1
            else:
                ctx.write(USERTABLE, encode_key(key), payload)
        return hits

    return logic


class YcsbMetrics:
    __slots__ = ("commits", "aborts", "duration_s", "cycle_checks",
                 "cycle_check_nodes", "latency_ns", "max_latency_ns")

    def __init__(self, commits: int, aborts: int, duration_s: float,
                 cycle_checks: int, cycle_check_nodes: int,
                 latency_ns: int = 0, max_latency_ns: int = 0) -> None:
        self.commits = commits
        self.aborts = aborts
        self.duration_s = duration_s
        self.cycle_checks = cycle_checks
        self.cycle_check_nodes = cycle_check_nodes
        self.latency_ns = latency_ns
        self.max_latency_ns = max_latency_ns

    @property
    def throughput_tps(self) -> float:
        return self.commits / self.duration_s

    @property
    def abort_rate(self) -> float:
        total = self.commits + self.aborts
        return self.aborts / total if total else 0.0

    @property
    def mean_cycle_check_nodes(self) -> float:
        if not self.cycle_checks:
            return 0.0
        return self.cycle_check_nodes / self.cycle_checks

    def snapshot(self) -> dict:
        total = max(self.commits + self.aborts, 1)
        return {
            "commits": self.commits,
            "aborts": self.aborts,
            "abort_rate": round(self.abort_rate, 6),
            "throughput_tps": round(self.throughput_tps, 3),
            "mean_cycle_check_nodes": round(self.mean_cycle_check_nodes, 3),
            "mean_latency_ms": round(self.latency_ns / total / 1e6, 3),
            "max_latency_ms": round(self.max_latency_ns / 1e6, 3),
        }


def run_ycsb_a(config: YcsbConfig, engine: Engine, threads: int,
               duration_s: float, seed: int, delay_us: int = 0) -> YcsbMetrics:
    """Drive the mix from the given number of worker threads for a
    wall-clock window; cycle-check sizes are read as a delta over the
    window so repeated runs on one engine stay independent."""
    if threads < 1:
        raise ValueError("threads must be at least 1")
    before = engine.stats.snapshot()
    deadline = time.monotonic() + duration_s
    counts = [[0, 0, 0, 0] for _ in range(threads)]
    delay_s = delay_us / 1e6

    def worker_loop(idx: int) -> None:
        worker = idx + 1
        rng = random.Random(seed * 31 + worker)
        commits = aborts = latency = slowest = 0
        while time.monotonic() < deadline:
            logic = make_ycsb_txn(config, rng)
            run = logic if delay_s == 0 else (
                lambda ctx, logic=logic: logic(DelayedContext(ctx, delay_s)))
            t0 = time.perf_counter_ns()
            res = engine.run_transaction(worker, run)
            ns = time.perf_counter_ns() - t0
            commits += res.committed
            aborts += res.aborts
            latency += ns
            if ns > slowest:
                slowest = ns
        counts[idx][:] = commits, aborts, latency, slowest

    workers = [threading.Thread(target=worker_loop, args=(i,),
                                name=f"ycsb-{i + 1}", daemon=True)
               for i in range(threads)]
    for th in workers:
        th.start()
    for th in workers:
        th.join()
    after = engine.stats.snapshot()
    return YcsbMetrics(
        commits=sum(row[0] for row in counts),
        aborts=sum(row[1] for row in counts),
        duration_s=duration_s,
        cycle_checks=after["cycle_checks"] - before["cycle_checks"],
        cycle_check_nodes=(after["cycle_check_nodes"]
                           - before["cycle_check_nodes"]),
        latency_ns=sum(row[2] for row in counts),
        max_latency_ns=max(row[3] for row in counts),
    )
