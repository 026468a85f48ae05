"""Shared transaction-engine plumbing.

Every engine (the serialization-graph engines and both baselines) exposes the
same surface: begin/read/scan/write/insert/delete/commit/abort plus a
run_transaction retry loop, so workloads and the benchmark driver stay
engine-agnostic. Payloads are opaque bytes; key semantics live in storage.
"""
from __future__ import annotations

import threading
import time
from typing import Any, Callable, Optional

ACTIVE = 0
COMMITTED = 1
ABORTED = 2

NO_READABLE_VERSION = "no-readable-version"
CYCLE_ON_ORDERING = "cycle-on-ordering"
CROSS_EPOCH_FORWARDING = "cross-epoch-forwarding"
OCC_VALIDATION = "occ-validation"
KEY_SET_DRIFT = "key-set-drift"
RETRY_EXHAUSTED = "retry-exhausted"


class TxAborted(Exception):
    """Raised by engine calls when the transaction has been aborted.

    The engine has already cleaned up; the caller must stop using the handle
    and either retry with a fresh transaction or give up.
    """

    def __init__(self, reason: str) -> None:
        super().__init__(reason)
        self.reason = reason


class TxResult:
    __slots__ = ("committed", "value", "attempts", "aborts", "reason")

    def __init__(self, committed: bool, value: Any, attempts: int,
                 aborts: int, reason: Optional[str]) -> None:
        self.committed = committed
        self.value = value
        self.attempts = attempts
        self.aborts = aborts
        self.reason = reason

    def __repr__(self) -> str:  # debug aid only
        state = "committed" if self.committed else f"failed({self.reason})"
        return f"TxResult({state}, attempts={self.attempts})"


class TxContext:
    """What transaction logic sees: engine operations bound to one handle.

    ``structural`` marks reads whose value shapes the key set of the
    transaction (tree links, existence checks); the deterministic locking
    baseline re-validates exactly these during its locked re-execution.
    Other engines ignore the flag.
    """

    __slots__ = ("engine", "tx")

    def __init__(self, engine: "Engine", tx) -> None:
        self.engine = engine
        self.tx = tx

    def read(self, table: str, key: bytes, structural: bool = False):
        return self.engine.read(self.tx, table, key, structural=structural)

    def scan(self, table: str, lo: bytes, hi: bytes, structural: bool = False):
        return self.engine.scan(self.tx, table, lo, hi, structural=structural)

    def write(self, table: str, key: bytes, payload: bytes) -> None:
        self.engine.write(self.tx, table, key, payload)

    def insert(self, table: str, key: bytes, payload: bytes) -> None:
        self.engine.insert(self.tx, table, key, payload)

    def delete(self, table: str, key: bytes) -> None:
        self.engine.delete(self.tx, table, key)


class DelayedContext:
    """Interactive-mode wrapper: a fixed think-time after every operation."""

    __slots__ = ("_ctx", "_delay_s")

    def __init__(self, ctx: TxContext, delay_s: float) -> None:
        self._ctx = ctx
        self._delay_s = delay_s

    def _after(self, value):
        time.sleep(self._delay_s)
        return value

    def read(self, table: str, key: bytes, structural: bool = False):
        return self._after(self._ctx.read(table, key, structural=structural))

    def scan(self, table: str, lo: bytes, hi: bytes,
             structural: bool = False):
        return self._after(self._ctx.scan(table, lo, hi,
                                          structural=structural))

    def write(self, table: str, key: bytes, payload: bytes) -> None:
        return self._after(self._ctx.write(table, key, payload))

    def insert(self, table: str, key: bytes, payload: bytes) -> None:
        return self._after(self._ctx.insert(table, key, payload))

    def delete(self, table: str, key: bytes) -> None:
        return self._after(self._ctx.delete(table, key))


class EngineStats:
    """Run counters shared across worker threads.

    Phase timers are recorded only while profiling is on; cycle-check sizes
    are always counted (they are a reported metric, not a profile detail).
    """

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.commits = 0
        self.aborts = 0
        self.cycle_checks = 0
        self.cycle_check_nodes = 0
        self.cycle_check_max = 0
        self.profile = False
        self.read_ns = 0
        self.ordering_ns = 0
        self.propagation_ns = 0

    def note_cycle_check(self, nodes: int) -> None:
        with self._lock:
            self.cycle_checks += 1
            self.cycle_check_nodes += nodes
            if nodes > self.cycle_check_max:
                self.cycle_check_max = nodes

    def note_commit(self) -> None:
        with self._lock:
            self.commits += 1

    def note_abort(self) -> None:
        with self._lock:
            self.aborts += 1

    def add_phase_ns(self, phase: str, ns: int) -> None:
        with self._lock:
            if phase == "read":
                self.read_ns += ns
            elif phase == "ordering":
                self.ordering_ns += ns
            else:
                self.propagation_ns += ns

    def mean_cycle_check_nodes(self) -> float:
        with self._lock:
            if not self.cycle_checks:
                return 0.0
            return self.cycle_check_nodes / self.cycle_checks

    def snapshot(self) -> dict:
        with self._lock:
            return {
                "commits": self.commits,
                "aborts": self.aborts,
                "cycle_checks": self.cycle_checks,
                "cycle_check_nodes": self.cycle_check_nodes,
                "cycle_check_max": self.cycle_check_max,
                "read_ns": self.read_ns,
                "ordering_ns": self.ordering_ns,
                "propagation_ns": self.propagation_ns,
            }


class Engine:
    """Base class wiring the retry loop and the history hooks.

    Subclasses implement begin/read/scan/write/insert/delete/commit/abort.
    ``history`` is an optional recorder with begin/read/commit/abort methods;
    when unset the hooks cost one attribute check.
    """

    def __init__(self, db) -> None:
        self.db = db
        self.stats = EngineStats()
        self.history = None

    # subclass surface -----------------------------------------------------

    def begin(self, worker: int):
        raise NotImplementedError

    def read(self, tx, table: str, key: bytes, structural: bool = False):
        raise NotImplementedError

    def scan(self, tx, table: str, lo: bytes, hi: bytes,
             structural: bool = False):
        raise NotImplementedError

    def write(self, tx, table: str, key: bytes, payload: bytes) -> None:
        raise NotImplementedError

    def insert(self, tx, table: str, key: bytes, payload: bytes) -> None:
        raise NotImplementedError

    def delete(self, tx, table: str, key: bytes) -> None:
        raise NotImplementedError

    def commit(self, tx) -> None:
        raise NotImplementedError

    def abort(self, tx) -> None:
        raise NotImplementedError

    def close(self) -> None:
        pass

    def __enter__(self) -> "Engine":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # retry loop -------------------------------------------------------------

    def run_transaction(self, worker: int, logic: Callable[[TxContext], Any],
                        max_retries: Optional[int] = None,
                        backoff_s: float = 0.0) -> TxResult:
        """Run ``logic`` until it commits; each abort costs one retry.

        ``max_retries`` of None retries forever; a bound turns exhaustion
        into a failed TxResult rather than an exception.
        """
        aborts = 0
        while True:
            tx = self.begin(worker)
            try:
                value = logic(TxContext(self, tx))
                self.commit(tx)
                return TxResult(True, value, aborts + 1, aborts, None)
            except TxAborted as e:
                if tx.status == ACTIVE:
                    self.abort(tx)
                aborts += 1
                if max_retries is not None and aborts > max_retries:
                    return TxResult(False, None, aborts, aborts, e.reason)
                if backoff_s:
                    time.sleep(backoff_s)


def make_engine(name: str, db, **kwargs) -> Engine:
    """Engine factory keyed by the benchmark config vocabulary."""
    if name == "oze-central":
        from .oze import OzeCentral
        return OzeCentral(db, **kwargs)
    if name == "oze-decentral":
        from .oze import OzeDecentral
        return OzeDecentral(db, **kwargs)
    if name == "occ":
        from .baselines import OccEngine
        return OccEngine(db, **kwargs)
    if name == "d2pl":
        from .baselines import D2plEngine
        return D2plEngine(db, **kwargs)
    raise ValueError(f"unknown engine: {name}")


ENGINE_NAMES = ("oze-central", "oze-decentral", "occ", "d2pl")
