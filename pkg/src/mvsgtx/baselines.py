"""Comparison engines behind the shared transaction surface.

OccEngine — optimistic concurrency control in the classic validate-at-commit
style: reads observe chain-latest committed versions lock-free, writes buffer
locally, and commit locks the write records in one sorted order, revalidates
that every observed version is still its record's latest and that no other
committer holds a read record locked, then installs the new versions.

D2plEngine — deterministic two-phase locking with a reconnaissance pass:
transaction logic runs once lock-free to learn its key set, every key is
locked in one globally sorted order (written keys exclusive, read keys
shared), and the logic re-runs under the locks. Reads marked structural
revalidate against the reconnaissance value and scans revalidate their key
sets; any drift releases everything and retries, counted as an abort.
Sorted upfront acquisition makes lock-wait cycles impossible; a wait-graph
check counts them anyway so runs can assert zero.
"""
from __future__ import annotations

import threading
from typing import Any, Callable, Optional

from .core import Record, Version, VersionState
from .engine import (
    ABORTED, ACTIVE, COMMITTED, Engine, KEY_SET_DRIFT, OCC_VALIDATION,
    TxAborted, TxContext, TxResult,
)


def _latest_committed(rec: Record) -> Version:
    """Newest committed version; chains always end in a committed one."""
    v = rec.latest
    while v is not None and v.state != VersionState.COMMITTED:
        v = v.prev
    assert v is not None
    return v


class OccTx:
    __slots__ = ("txid", "worker", "status", "read_set", "writes")

    def __init__(self, txid: int, worker: int) -> None:
        self.txid = txid
        self.worker = worker
        self.status = ACTIVE
        # ident -> (record, observed version); first observation wins
        self.read_set: dict = {}
        # ident -> (record, payload) in program order
        self.writes: dict = {}


class OccEngine(Engine):
    """Validate-at-commit optimism with a plain commit-counter for ids."""

    def __init__(self, db) -> None:
        super().__init__(db)
        self._id_lock = threading.Lock()
        self._next_txid = 1
        self._dirty: set[Record] = set()
        self._dirty_lock = threading.Lock()

    def begin(self, worker: int) -> OccTx:
        with self._id_lock:
            txid = self._next_txid
            self._next_txid += 1
        tx = OccTx(txid, worker)
        if self.history is not None:
            self.history.on_begin(txid)
        return tx

    def _observe(self, tx: OccTx, rec: Record):
        v = _latest_committed(rec)
        tx.read_set[rec.ident] = (rec, v)
        if self.history is not None:
            self.history.on_read(tx.txid, rec.table_name, rec.key, v.txid)
        return v.payload

    def read(self, tx: OccTx, table: str, key: bytes,
             structural: bool = False):
        ident = (table, key)
        buffered = tx.writes.get(ident)
        if buffered is not None:
            return buffered[1]
        cached = tx.read_set.get(ident)
        if cached is not None:
            return cached[1].payload
        rec = self.db.table(table).get_record(key)
        if rec is None:
            return None
        return self._observe(tx, rec)

    def scan(self, tx: OccTx, table: str, lo: bytes, hi: bytes,
             structural: bool = False):
        out = []
        for rec in self.db.table(table).range_records(lo, hi):
            ident = rec.ident
            buffered = tx.writes.get(ident)
            if buffered is not None:
                payload = buffered[1]
            else:
                cached = tx.read_set.get(ident)
                payload = (cached[1].payload if cached is not None
                           else self._observe(tx, rec))
            if payload is not None:
                out.append((rec.key, payload))
        return out

    def write(self, tx: OccTx, table: str, key: bytes,
              payload: bytes) -> None:
        rec = self.db.table(table).get_or_create(key)
        tx.writes[rec.ident] = (rec, payload)

    def insert(self, tx: OccTx, table: str, key: bytes,
               payload: bytes) -> None:
        # observing the prior state makes racing inserts a read-write
        # conflict, mirroring the primary engines' upsert semantics
        rec = self.db.table(table).get_or_create(key)
        ident = rec.ident
        if ident not in tx.writes and ident not in tx.read_set:
            self._observe(tx, rec)
        tx.writes[ident] = (rec, payload)

    def delete(self, tx: OccTx, table: str, key: bytes) -> None:
        rec = self.db.table(table).get_or_create(key)
        tx.writes[rec.ident] = (rec, None)

    def commit(self, tx: OccTx) -> None:
        if tx.status != ACTIVE:
            raise TxAborted("not-active")
        locked: list[Record] = []
        ok = True
        try:
            for ident in sorted(tx.writes):
                rec = tx.writes[ident][0]
                rec.latch.acquire()
                rec.rw = tx.txid
                locked.append(rec)
            for rec, ver in tx.read_set.values():
                owner = rec.rw
                if rec.latest is not ver or owner not in (None, tx.txid):
                    ok = False
                    break
            if ok:
                for ident, (rec, payload) in tx.writes.items():
                    prev = rec.latest
                    rec.latest = Version(tx.txid, payload,
                                         VersionState.COMMITTED,
                                         prev=prev)
                    if self.history is not None:
                        self.history.on_install(
                            tx.txid, rec.table_name, rec.key, None,
                            prev.txid if prev is not None else None)
        finally:
            for rec in locked:
                rec.rw = None
                rec.latch.release()
        if not ok:
            self.abort(tx)
            raise TxAborted(OCC_VALIDATION)
        if tx.writes:
            with self._dirty_lock:
                self._dirty.update(rec for rec, _p in tx.writes.values())
        tx.status = COMMITTED
        self.stats.note_commit()
        if self.history is not None:
            self.history.on_commit(tx.txid, list(tx.writes.keys()))

    def abort(self, tx: OccTx) -> None:
        if tx.status != ACTIVE:
            return
        tx.status = ABORTED
        self.stats.note_abort()
        if self.history is not None:
            self.history.on_abort(tx.txid)

    def collect(self) -> None:
        """Trim superseded versions; observations pin only chain-latest."""
        with self._dirty_lock:
            batch = list(self._dirty)
            self._dirty.clear()
        for rec in batch:
            with rec.latch:
                if rec.latest is not None:
                    rec.latest.prev = None


class _RwLock:
    """Reader-writer lock tracking owner workers for the wait graph."""

    __slots__ = ("_cond", "_readers", "_writer")

    def __init__(self) -> None:
        self._cond = threading.Condition(threading.Lock())
        self._readers: set[int] = set()
        self._writer: Optional[int] = None

    def _owners(self) -> set[int]:
        owners = set(self._readers)
        if self._writer is not None:
            owners.add(self._writer)
        return owners

    def acquire_read(self, worker: int, note_wait, clear_wait) -> None:
        with self._cond:
            while self._writer is not None:
                note_wait(worker, self._owners())
                self._cond.wait()
            clear_wait(worker)
            self._readers.add(worker)

    def acquire_write(self, worker: int, note_wait, clear_wait) -> None:
        with self._cond:
            while self._writer is not None or self._readers:
                note_wait(worker, self._owners())
                self._cond.wait()
            clear_wait(worker)
            self._writer = worker

    def release_read(self, worker: int) -> None:
        with self._cond:
            self._readers.discard(worker)
            self._cond.notify_all()

    def release_write(self, worker: int) -> None:
        with self._cond:
            if self._writer == worker:
                self._writer = None
            self._cond.notify_all()


class D2plTx:
    __slots__ = ("txid", "worker", "status", "mode", "reads", "structural",
                 "write_keys", "writes", "scans", "plan")

    def __init__(self, txid: int, worker: int, mode: str) -> None:
        self.txid = txid
        self.worker = worker
        self.status = ACTIVE
        self.mode = mode                      # "recon" or "locked"
        self.reads: dict = {}                 # ident -> payload seen
        self.structural: set = set()          # idents whose value shaped logic
        self.write_keys: set = set()
        self.writes: dict = {}                # ident -> (record, payload)
        self.scans: list = []                 # (table, lo, hi, keys tuple)
        self.plan: Optional[dict] = None      # ident -> "r"/"w" (locked mode)


class D2plEngine(Engine):
    """Reconnaissance, sorted locking, locked re-execution with validation.

    Whole-transaction logic is the unit of execution: use run_transaction.
    The interactive begin/commit surface is unavailable because incremental
    operations cannot know the full key set upfront, which the sorted
    acquisition order (the deadlock-freedom argument) depends on.
    """

    def __init__(self, db, max_drift_retries: int = 10) -> None:
        super().__init__(db)
        self.max_drift_retries = max_drift_retries
        self._id_lock = threading.Lock()
        self._next_txid = 1
        self._dirty: set[Record] = set()
        self._dirty_lock = threading.Lock()
        self._waits: dict[int, set[int]] = {}
        self._wait_lock = threading.Lock()
        self.lock_wait_cycles = 0

    # -- wait-graph bookkeeping ------------------------------------------------

    def _note_wait(self, worker: int, owners: set[int]) -> None:
        with self._wait_lock:
            self._waits[worker] = owners - {worker}
            # walk the wait graph; a path back to the waiter is a deadlock
            stack, seen = list(self._waits[worker]), set()
            while stack:
                w = stack.pop()
                if w == worker:
                    self.lock_wait_cycles += 1
                    return
                if w in seen:
                    continue
                seen.add(w)
                stack.extend(self._waits.get(w, ()))

    def _clear_wait(self, worker: int) -> None:
        with self._wait_lock:
            self._waits.pop(worker, None)

    # -- id allocation -----------------------------------------------------------

    def _alloc_txid(self) -> int:
        with self._id_lock:
            txid = self._next_txid
            self._next_txid += 1
            return txid

    # -- operation surface (dispatches on transaction mode) -----------------------

    def read(self, tx: D2plTx, table: str, key: bytes,
             structural: bool = False):
        ident = (table, key)
        buffered = tx.writes.get(ident)
        if buffered is not None:
            return buffered[1]
        if tx.mode == "locked":
            if ident not in tx.plan:
                raise TxAborted(KEY_SET_DRIFT)
            rec = self.db.table(table).get_record(key)
            ver = None if rec is None else _latest_committed(rec)
            payload = None if ver is None else ver.payload
            if structural and ident in tx.structural \
                    and payload != tx.reads.get(ident):
                raise TxAborted(KEY_SET_DRIFT)
            if ver is not None and self.history is not None:
                self.history.on_read(tx.txid, table, key, ver.txid)
            return payload
        if ident in tx.reads:
            return tx.reads[ident]
        rec = self.db.table(table).get_record(key)
        payload = None if rec is None else _latest_committed(rec).payload
        tx.reads[ident] = payload
        if structural:
            tx.structural.add(ident)
        return payload

    def scan(self, tx: D2plTx, table: str, lo: bytes, hi: bytes,
             structural: bool = False):
        records = self.db.table(table).range_records(lo, hi)
        out, keys = [], []
        for rec in records:
            ident = rec.ident
            buffered = tx.writes.get(ident)
            if buffered is not None:
                payload = buffered[1]
            elif tx.mode == "locked":
                if ident not in tx.plan:
                    raise TxAborted(KEY_SET_DRIFT)
                ver = _latest_committed(rec)
                payload = ver.payload
                if self.history is not None:
                    self.history.on_read(tx.txid, rec.table_name, rec.key,
                                         ver.txid)
            else:
                payload = _latest_committed(rec).payload
                tx.reads.setdefault(ident, payload)
            if payload is not None:
                out.append((rec.key, payload))
                keys.append(rec.key)
        # a scan's result set always shapes the key set: validate it
        if tx.mode == "locked":
            expected = next((s[3] for s in tx.scans
                             if s[0] == table and s[1] == lo and s[2] == hi),
                            None)
            if expected is not None and tuple(keys) != expected:
                raise TxAborted(KEY_SET_DRIFT)
        else:
            tx.scans.append((table, lo, hi, tuple(keys)))
        return out

    def write(self, tx: D2plTx, table: str, key: bytes,
              payload: bytes) -> None:
        self._buffer_write(tx, table, key, payload)

    def insert(self, tx: D2plTx, table: str, key: bytes,
               payload: bytes) -> None:
        self._buffer_write(tx, table, key, payload)

    def delete(self, tx: D2plTx, table: str, key: bytes) -> None:
        self._buffer_write(tx, table, key, None)

    def _buffer_write(self, tx: D2plTx, table: str, key: bytes,
                      payload) -> None:
        rec = self.db.table(table).get_or_create(key)
        ident = rec.ident
        if tx.mode == "locked" and tx.plan.get(ident) != "w":
            raise TxAborted(KEY_SET_DRIFT)
        tx.write_keys.add(ident)
        tx.writes[ident] = (rec, payload)

    # -- whole-transaction execution ---------------------------------------------

    def run_transaction(self, worker: int, logic: Callable[[TxContext], Any],
                        max_retries: Optional[int] = None,
                        backoff_s: float = 0.0) -> TxResult:
        retries = self.max_drift_retries if max_retries is None else max_retries
        aborts = 0
        while True:
            recon = D2plTx(0, worker, "recon")
            logic(TxContext(self, recon))
            plan = {ident: "w" for ident in recon.write_keys}
            for ident in recon.reads:
                plan.setdefault(ident, "r")
            try:
                value = self._execute_locked(worker, logic, recon, plan)
                return TxResult(True, value, aborts + 1, aborts, None)
            except TxAborted as e:
                aborts += 1
                if aborts > retries:
                    return TxResult(False, None, aborts, aborts, e.reason)

    def _execute_locked(self, worker: int, logic, recon: D2plTx,
                        plan: dict) -> Any:
        locked: list[tuple[_RwLock, str]] = []
        txid = self._alloc_txid()
        if self.history is not None:
            self.history.on_begin(txid)
        tx = D2plTx(txid, worker, "locked")
        tx.reads = recon.reads
        tx.structural = recon.structural
        tx.scans = recon.scans
        tx.plan = plan
        try:
            for ident in sorted(plan):
                rec = self.db.table(ident[0]).get_or_create(ident[1])
                lock = rec.rw
                if lock is None:
                    with rec.latch:
                        if rec.rw is None:
                            rec.rw = _RwLock()
                        lock = rec.rw
                mode = plan[ident]
                if mode == "w":
                    lock.acquire_write(worker, self._note_wait,
                                       self._clear_wait)
                else:
                    lock.acquire_read(worker, self._note_wait,
                                      self._clear_wait)
                locked.append((lock, mode))
            value = logic(TxContext(self, tx))
            for ident, (rec, payload) in tx.writes.items():
                with rec.latch:
                    prev = rec.latest
                    rec.latest = Version(txid, payload,
                                         VersionState.COMMITTED,
                                         prev=prev)
                    if self.history is not None:
                        self.history.on_install(
                            txid, rec.table_name, rec.key, None,
                            prev.txid if prev is not None else None)
            if tx.writes:
                with self._dirty_lock:
                    self._dirty.update(r for r, _p in tx.writes.values())
            tx.status = COMMITTED
            self.stats.note_commit()
            if self.history is not None:
                self.history.on_commit(txid, list(tx.writes.keys()))
            return value
        except TxAborted:
            tx.status = ABORTED
            self.stats.note_abort()
            if self.history is not None:
                self.history.on_abort(txid)
            raise
        finally:
            for lock, mode in locked:
                if mode == "w":
                    lock.release_write(worker)
                else:
                    lock.release_read(worker)

    # -- interactive surface is deliberately unavailable ---------------------------

    _NO_INTERACTIVE = ("deterministic locking executes whole transactions; "
                       "use run_transaction")

    def begin(self, worker: int):
        raise RuntimeError(self._NO_INTERACTIVE)

    def commit(self, tx) -> None:
        raise RuntimeError(self._NO_INTERACTIVE)

    def abort(self, tx) -> None:
        raise RuntimeError(self._NO_INTERACTIVE)

    def collect(self) -> None:
        with self._dirty_lock:
            batch = list(self._dirty)
            self._dirty.clear()
        for rec in batch:
            with rec.latch:
                if rec.latest is not None:
                    rec.latest.prev = None
