"""Serialization-graph transaction engines.

Three phases. Local ordering: a read scans the record's version chain from
the latest version toward older ones, tentatively adding the reads-from edge
and keeping the first version whose edge leaves the graph acyclic; skipped
versions leave an anti-dependency edge (the reader must precede their
creators). A write only buffers. Global ordering at commit: for each written
record, concurrent readers of the record are postposed behind the writer
when that stays acyclic; otherwise the writer is order-forwarded in front of
the versions those readers read (never across an epoch boundary). Finalizing
flips the transaction's pending versions to committed.

Two graph managements implement the same contract. The centralized engine
keeps one global graph under one latch. The decentralized engine gives every
record its own graph and latch, carries a transaction-local graph between
them, merges constraints at every touch, and at commit propagates its chosen
orders to every record graph its followers have read — optionally fanning
that propagation out across validator threads.
"""
from __future__ import annotations

import threading
import time
from collections import deque
from typing import Optional

from .core import (
    GENESIS_TXID, EpochManager, Record, TxIdAllocator, Version, VersionState,
    txid_epoch,
)
from .engine import (
    ABORTED, ACTIVE, COMMITTED, CROSS_EPOCH_FORWARDING, CYCLE_ON_ORDERING,
    Engine, NO_READABLE_VERSION, TxAborted,
)
from .graph import Mvsg
from .storage import (
    gc_versions, insert_version_before, insert_version_latest, unlink_version,
)

# Aborted-id registry entries survive this many epochs past reclamation, so
# stale node copies parked in long transactions' local graphs cannot
# resurrect an aborted transaction after its registry entry is dropped.
ABORT_REGISTRY_SLACK = 10_000


class _OrderingFailed(Exception):
    def __init__(self, reason: str) -> None:
        super().__init__(reason)
        self.reason = reason


class OzeTx:
    __slots__ = ("txid", "worker", "status", "read_cache", "writes",
                 "inserted", "graph", "sync", "touched")

    def __init__(self, txid: int, worker: int) -> None:
        self.txid = txid
        self.worker = worker
        self.status = ACTIVE
        # ident -> (record, version) for protocol reads (first read wins)
        self.read_cache: dict = {}
        # ident -> (record, payload); insertion order is the ordering order
        self.writes: dict = {}
        # (record, version) pairs spliced into chains during ordering
        self.inserted: list = []
        self.graph: Optional[Mvsg] = None      # decentralized only
        self.sync: Optional[dict] = None       # ident -> (sent_rev, recv_rev)
        self.touched: Optional[dict] = None    # ident -> record (graphs hit)


class OzeBase(Engine):
    """Read/write/commit surface shared by both graph managements."""

    def __init__(self, db, epoch_interval_ms: Optional[float] = 40.0) -> None:
        super().__init__(db)
        self.epochs = EpochManager(interval_ms=epoch_interval_ms or 40.0)
        self._allocators: dict[int, TxIdAllocator] = {}
        self._live: dict[int, int] = {}
        self._admin = threading.Lock()
        self._gc_thread: Optional[threading.Thread] = None
        self._gc_stop = threading.Event()
        if epoch_interval_ms is not None:
            self.epochs.start()

    # -- lifecycle ---------------------------------------------------------

    def start_gc(self, interval_s: float = 0.05) -> None:
        if self._gc_thread is not None:
            return
        self._gc_stop.clear()

        def run() -> None:
            while not self._gc_stop.wait(interval_s):
                self.collect()

        self._gc_thread = threading.Thread(target=run, name="oze-gc",
                                           daemon=True)
        self._gc_thread.start()

    def stop_gc(self) -> None:
        if self._gc_thread is None:
            return
        self._gc_stop.set()
        self._gc_thread.join()
        self._gc_thread = None

    def close(self) -> None:
        self.stop_gc()
        self.epochs.stop()

    def collect(self) -> None:
        raise NotImplementedError

    def _heartbeat_idle_workers(self) -> None:
        with self._admin:
            idle = [w for w, n in self._live.items() if n == 0]
        for w in idle:
            self.epochs.refresh(w)

    # -- transaction surface -------------------------------------------------

    def begin(self, worker: int) -> OzeTx:
        with self._admin:
            alloc = self._allocators.get(worker)
            if alloc is None:
                alloc = TxIdAllocator(self.epochs, worker)
                self._allocators[worker] = alloc
                self._live[worker] = 0
            self._live[worker] += 1
        tx = self._new_tx(alloc.next_txid(), worker)
        if self.history is not None:
            self.history.on_begin(tx.txid)
        return tx

    def _new_tx(self, txid: int, worker: int) -> OzeTx:
        return OzeTx(txid, worker)

    def _finish(self, tx: OzeTx, status: int) -> None:
        tx.status = status
        with self._admin:
            self._live[tx.worker] -= 1

    def read(self, tx: OzeTx, table: str, key: bytes,
             structural: bool = False):
        ident = (table, key)
        buffered = tx.writes.get(ident)
        if buffered is not None:
            return buffered[1]
        cached = tx.read_cache.get(ident)
        if cached is not None:
            return cached[1].payload
        rec = self.db.table(table).get_record(key)
        if rec is None:
            # no cell: absence with no dependency (no index-gap protection)
            return None
        return self._tracked_read(tx, rec)

    def scan(self, tx: OzeTx, table: str, lo: bytes, hi: bytes,
             structural: bool = False):
        out = []
        for rec in self.db.table(table).range_records(lo, hi):
            ident = rec.ident
            buffered = tx.writes.get(ident)
            if buffered is not None:
                payload = buffered[1]
            else:
                cached = tx.read_cache.get(ident)
                if cached is not None:
                    payload = cached[1].payload
                else:
                    payload = self._tracked_read(tx, rec)
            if payload is not None:
                out.append((rec.key, payload))
        return out

    def _tracked_read(self, tx: OzeTx, rec: Record):
        if self.stats.profile:
            t0 = time.perf_counter_ns()
            version = self._protocol_read(tx, rec)
            self.stats.add_phase_ns("read", time.perf_counter_ns() - t0)
        else:
            version = self._protocol_read(tx, rec)
        tx.read_cache[rec.ident] = (rec, version)
        if self.history is not None:
            self.history.on_read(tx.txid, rec.table_name, rec.key,
                                 version.txid)
        return version.payload

    def write(self, tx: OzeTx, table: str, key: bytes,
              payload: bytes) -> None:
        rec = self.db.table(table).get_or_create(key)
        tx.writes[rec.ident] = (rec, payload)

    def insert(self, tx: OzeTx, table: str, key: bytes,
               payload: bytes) -> None:
        """Write that also reads the cell first (creating it if absent), so
        racing inserts of one key carry a reads-from conflict on its prior
        state and first-come-first-win leaves at most one of them committed.
        """
        rec = self.db.table(table).get_or_create(key)
        ident = rec.ident
        if ident not in tx.writes and ident not in tx.read_cache:
            self._tracked_read(tx, rec)
        tx.writes[ident] = (rec, payload)

    def delete(self, tx: OzeTx, table: str, key: bytes) -> None:
        rec = self.db.table(table).get_or_create(key)
        tx.writes[rec.ident] = (rec, None)

    def commit(self, tx: OzeTx) -> None:
        if tx.status != ACTIVE:
            raise TxAborted("not-active")
        try:
            if self.stats.profile:
                t0 = time.perf_counter_ns()
                self._global_ordering(tx)
                self.stats.add_phase_ns("ordering",
                                        time.perf_counter_ns() - t0)
            else:
                self._global_ordering(tx)
        except _OrderingFailed as e:
            self.abort(tx)
            raise TxAborted(e.reason) from None
        for _rec, ver in tx.inserted:
            ver.state = VersionState.COMMITTED
        self._finish(tx, COMMITTED)
        self.stats.note_commit()
        if self.history is not None:
            self.history.on_commit(tx.txid, list(tx.writes.keys()))

    # -- shared protocol bodies ----------------------------------------------

    def _select_version(self, graph: Mvsg, txid: int, record: Record,
                        reclamation: int) -> Optional[Version]:
        """Chain scan of the local-ordering read: first consistent version.

        The initial-state version is always consistent (nothing can precede
        it). Non-latest versions at or below the reclamation epoch belong to
        settled history: reading them would need anti-dependency edges toward
        creators whose graph context is already collected, so the scan stops
        and the read fails. Pending versions are skipped, but the skip still
        records that this reader precedes their creators; without that edge
        two concurrent read-write transactions could both finalize a write
        skew through the pending window.
        """
        latest = record.latest
        v = latest
        while v is not None:
            st = v.state
            if st == VersionState.COMMITTED:
                if v.txid == GENESIS_TXID:
                    return v
                if v is not latest and txid_epoch(v.txid) <= reclamation:
                    return None
                graph.add_reads_from_edge(v.txid, txid)
                ok = graph.is_acyclic(txid)
                self.stats.note_cycle_check(graph.last_check_nodes)
                if ok:
                    return v
                graph.remove_reads_from_edge(v.txid, txid)
                graph.add_write_follower_edge(txid, v.txid)
            elif st == VersionState.PENDING:
                graph.add_write_follower_edge(txid, v.txid)
            v = v.prev
        return None

    def _order_record(self, g: Mvsg, tx: OzeTx, record: Record, ident,
                      ver: Version, decided: set) -> None:
        """One written record's ordering step on graph ``g`` (latch held).

        Postpose the record's readers behind the transaction; if that cycles,
        forward the transaction in front of the versions that must follow it.
        Raises _OrderingFailed on cross-epoch forwarding or a residual cycle.

        Every placement also records the version-order edge from the creator
        of the next-older chain neighbour. Without it, a reader that later
        picks this version up would have no graph path ordering that creator
        first, and a racing read-write transaction could slip an inconsistent
        order past the cycle checks.
        """
        txid = tx.txid
        readers = [r for r in g.find_readers(ident) if r != txid]
        added = []
        for r in readers:
            rnode = g.nodes.get(r)
            if rnode is None or txid not in rnode.write_follower:
                g.add_write_follower_edge(r, txid)
                added.append(r)
        below_added = None
        prev = record.latest
        if prev is not None and prev.txid not in (txid, GENESIS_TXID):
            pnode = g.nodes.get(prev.txid)
            if pnode is None or txid not in pnode.write_follower:
                g.add_write_follower_edge(prev.txid, txid)
                below_added = prev.txid
        ok = g.is_acyclic(txid)
        self.stats.note_cycle_check(g.last_check_nodes)
        if ok:
            decided.update(readers)
            insert_version_latest(record, ver)
            tx.inserted.append((record, ver))
            if self.history is not None:
                self.history.on_install(txid, record.table_name, record.key,
                                        None,
                                        prev.txid if prev is not None
                                        else None)
            return
        # keep postposing edges toward transactions already ordered before us;
        # only edges this call introduced may be taken back
        for r in added:
            if r not in decided:
                g.remove_write_follower_edge(r, txid)
        if below_added is not None:
            g.remove_write_follower_edge(below_added, txid)
        chain = []
        v = record.latest
        while v is not None:
            chain.append(v)
            v = v.prev
        followers = g.find_followers(ident, readers)
        node = g.nodes.get(txid)
        if node is not None:
            # creators in this chain that are already bound to follow us
            # (e.g. through a pending-skip edge) constrain the placement too
            in_chain = {cv.txid for cv in chain}
            followers.update(node.write_follower & in_chain)
        followers.discard(txid)
        if not followers:
            raise _OrderingFailed(CYCLE_ON_ORDERING)
        my_epoch = txid_epoch(txid)
        for f in followers:
            if txid_epoch(f) != my_epoch:
                raise _OrderingFailed(CROSS_EPOCH_FORWARDING)
        for f in followers:
            g.add_write_follower_edge(txid, f)
        anchor = None
        for cv in chain:                  # chain runs newest -> oldest
            if cv.txid in followers:
                anchor = cv
        if anchor is None:
            raise _OrderingFailed(CYCLE_ON_ORDERING)
        below = anchor.prev
        if below is not None and below.txid not in (txid, GENESIS_TXID):
            g.add_write_follower_edge(below.txid, txid)
        ok = g.is_acyclic(txid)
        self.stats.note_cycle_check(g.last_check_nodes)
        if not ok:
            raise _OrderingFailed(CYCLE_ON_ORDERING)
        if not insert_version_before(record, anchor, ver):
            # the anchor is read- or follower-pinned; fail closed anyway
            raise _OrderingFailed(CYCLE_ON_ORDERING)
        tx.inserted.append((record, ver))
        if self.history is not None:
            self.history.on_install(txid, record.table_name, record.key,
                                    anchor.txid,
                                    below.txid if below is not None else None)

    # variant hooks ----------------------------------------------------------

    def _protocol_read(self, tx: OzeTx, rec: Record) -> Version:
        raise NotImplementedError

    def _global_ordering(self, tx: OzeTx) -> None:
        raise NotImplementedError


class OzeCentral(OzeBase):
    """One global graph, one latch; reads, ordering, aborts, and collection
    all serialize on it. The reader index on the global graph keeps
    find_readers off the full node map."""

    def __init__(self, db, epoch_interval_ms: Optional[float] = 40.0) -> None:
        super().__init__(db, epoch_interval_ms)
        self.graph = Mvsg(track_readers=True)
        self.latch = threading.RLock()
        self._dirty: set[Record] = set()

    def _protocol_read(self, tx: OzeTx, rec: Record) -> Version:
        with self.latch:
            reclamation = self.epochs.reclamation_epoch()
            v = self._select_version(self.graph, tx.txid, rec, reclamation)
            if v is not None:
                self.graph.record_read(tx.txid, rec.ident, rec, v)
                return v
        self.abort(tx)
        raise TxAborted(NO_READABLE_VERSION)

    def _global_ordering(self, tx: OzeTx) -> None:
        with self.latch:
            decided: set[int] = set()
            for ident, (rec, payload) in tx.writes.items():
                ver = Version(tx.txid, payload)
                self._order_record(self.graph, tx, rec, ident, ver, decided)
                self._dirty.add(rec)
            # flip inside the latch: no reader can observe a pending window
            for _rec, ver in tx.inserted:
                ver.state = VersionState.COMMITTED

    def abort(self, tx: OzeTx) -> None:
        if tx.status != ACTIVE:
            return
        with self.latch:
            for rec, ver in tx.inserted:
                ver.state = VersionState.ABORTED
                unlink_version(rec, ver)
            self.graph.purge(tx.txid)
        self._finish(tx, ABORTED)
        self.stats.note_abort()
        if self.history is not None:
            self.history.on_abort(tx.txid)

    def collect(self) -> None:
        self._heartbeat_idle_workers()
        with self._admin:
            if not self._live:
                return
        with self.latch:
            reclamation = self.epochs.reclamation_epoch()
            self.graph.clean(reclamation)
            pinned: dict = {}
            for node in self.graph.nodes.values():
                for ident, entry in node.read_set.items():
                    pinned.setdefault(ident, set()).add(entry[1])
            survivors = set()
            for rec in self._dirty:
                gc_versions(rec, reclamation, pinned.get(rec.ident))
                if rec.chain_length() > 1:
                    survivors.add(rec)
            self._dirty = survivors

    def dump_graph(self) -> str:
        with self.latch:
            return self.graph.dump()


class OzeDecentral(OzeBase):
    """Per-record graphs and latches with transaction-local carry graphs.

    Constraint flow: a read merges the local graph into the record's graph,
    selects against the merged picture, and merges back. Commit phase 1 does
    the same around the ordering body per written record; phase 2 walks every
    record read by the transaction's transitive followers, merging in and
    checking for cycles, until no new target appears (first-come-first-win:
    the later orderer is the one that sees the combined constraints and
    aborts). ``validators`` > 1 fans phase 2 across threads that share one
    deduplicating target queue and merge their working graphs at the end.
    """

    def __init__(self, db, epoch_interval_ms: Optional[float] = 40.0,
                 validators: int = 1, parallel_min_targets: int = 8) -> None:
        if validators < 1:
            raise ValueError("validators must be >= 1")
        super().__init__(db, epoch_interval_ms)
        self.validators = validators
        self.parallel_min_targets = parallel_min_targets
        self._aborted: dict[int, int] = {}      # txid -> epoch
        self._ab_lock = threading.Lock()
        self._dirty: set[Record] = set()
        self._dirty_lock = threading.Lock()

    def _new_tx(self, txid: int, worker: int) -> OzeTx:
        tx = OzeTx(txid, worker)
        tx.graph = Mvsg()
        tx.sync = {}
        tx.touched = {}
        return tx

    @staticmethod
    def _graph_of(rec: Record) -> Mvsg:
        g = rec.graph
        if g is None:
            g = Mvsg()
            rec.graph = g
        return g

    def _mark_dirty(self, rec: Record) -> None:
        with self._dirty_lock:
            self._dirty.add(rec)

    def _protocol_read(self, tx: OzeTx, rec: Record) -> Version:
        ident = rec.ident
        tx.touched[ident] = rec
        with rec.latch:
            g = self._graph_of(rec)
            sent, recv = tx.sync.get(ident, (0, 0))
            g.merge_from(tx.graph, since_rev=sent, skip=self._aborted)
            reclamation = self.epochs.reclamation_epoch()
            v = self._select_version(g, tx.txid, rec, reclamation)
            if v is not None:
                g.record_read(tx.txid, ident, rec, v)
                recv = tx.graph.merge_from(g, since_rev=recv,
                                           skip=self._aborted)
                tx.sync[ident] = (tx.graph.rev, recv)
        self._mark_dirty(rec)
        if v is None:
            self.abort(tx)
            raise TxAborted(NO_READABLE_VERSION)
        return v

    def _global_ordering(self, tx: OzeTx) -> None:
        targets, queued, done = self._ordering_decide(tx)
        if self.stats.profile:
            t0 = time.perf_counter_ns()
            self._propagate(tx, targets, queued, done)
            self.stats.add_phase_ns("propagation",
                                    time.perf_counter_ns() - t0)
        else:
            self._propagate(tx, targets, queued, done)

    def _ordering_decide(self, tx: OzeTx) -> tuple:
        """Phase 1: pick a version order at every written record, then seed
        the propagation queue with the transaction's remaining read records."""
        decided: set[int] = set()
        done: set = set()
        targets: deque = deque()
        queued: set = set()
        for ident, (rec, payload) in tx.writes.items():
            ver = Version(tx.txid, payload)
            tx.touched[ident] = rec
            with rec.latch:
                g = self._graph_of(rec)
                sent, recv = tx.sync.get(ident, (0, 0))
                g.merge_from(tx.graph, since_rev=sent, skip=self._aborted)
                self._order_record(g, tx, rec, ident, ver, decided)
                self._collect_targets(tx, g, targets, queued, done, ident)
                recv = tx.graph.merge_from(g, since_rev=recv,
                                           skip=self._aborted)
                tx.sync[ident] = (tx.graph.rev, recv)
            self._mark_dirty(rec)
            done.add(ident)
        for ident, (rec, _v) in tx.read_cache.items():
            if ident not in done and ident not in queued:
                targets.append((ident, rec))
                queued.add(ident)
        return targets, queued, done

    def _propagate(self, tx: OzeTx, targets: deque, queued: set,
                   done: set) -> None:
        if self.validators > 1 and len(targets) >= self.parallel_min_targets:
            self._propagate_parallel(tx, targets, queued, done)
        else:
            self._propagate_sequential(tx, targets, queued, done)

    def _propagate_sequential(self, tx: OzeTx, targets: deque, queued: set,
                              done: set) -> None:
        while targets:
            ident, rec = targets.popleft()
            if ident in done:
                continue
            tx.touched[ident] = rec
            with rec.latch:
                g = self._graph_of(rec)
                sent, recv = tx.sync.get(ident, (0, 0))
                g.merge_from(tx.graph, since_rev=sent, skip=self._aborted)
                ok = g.is_acyclic(tx.txid)
                self.stats.note_cycle_check(g.last_check_nodes)
                if not ok:
                    raise _OrderingFailed(CYCLE_ON_ORDERING)
                self._collect_targets(tx, g, targets, queued, done, ident)
                recv = tx.graph.merge_from(g, since_rev=recv,
                                           skip=self._aborted)
                tx.sync[ident] = (tx.graph.rev, recv)
            self._mark_dirty(rec)
            done.add(ident)

    def _collect_targets(self, tx: OzeTx, g: Mvsg, targets: deque,
                         queued: set, done: set, current) -> None:
        """Enqueue every record read by a transitive follower (Alg.-style
        target expansion); the queued set deduplicates globally."""
        for f in g.get_all_followers(tx.txid):
            fnode = g.nodes.get(f)
            if fnode is None:
                continue
            for ident2, entry in fnode.read_set.items():
                if ident2 in done or ident2 in queued or ident2 == current:
                    continue
                targets.append((ident2, entry[0]))
                queued.add(ident2)

    def _propagate_parallel(self, tx: OzeTx, targets: deque, queued: set,
                            done: set) -> None:
        """Phase-2 propagation fanned across validator threads.

        Workers share the deduplicating target queue and the done set; each
        keeps a working copy of the transaction's local graph (merging into
        a shared graph per record visit would serialize them again). After
        quiescence the working graphs merge back and one final cycle check
        runs on the union — the same verdict the sequential walk reaches,
        discovered in a different order.
        """
        lock = threading.Lock()
        cond = threading.Condition(lock)
        state = {"inflight": 0, "failure": None}
        results: list[Mvsg] = []

        def body() -> None:
            wg = Mvsg()
            wg.merge_from(tx.graph, skip=self._aborted)
            sync: dict = {}
            while True:
                with cond:
                    item = None
                    while True:
                        if state["failure"] is not None:
                            break
                        if targets:
                            cand = targets.popleft()
                            if cand[0] in done:
                                continue
                            state["inflight"] += 1
                            item = cand
                            break
                        if state["inflight"] == 0:
                            break
                        cond.wait()
                    if item is None:
                        break
                ident, rec = item
                tx.touched[ident] = rec
                found: list = []
                failure = None
                try:
                    with rec.latch:
                        g = self._graph_of(rec)
                        sent, recv = sync.get(ident, (0, 0))
                        g.merge_from(wg, since_rev=sent, skip=self._aborted)
                        ok = g.is_acyclic(tx.txid)
                        self.stats.note_cycle_check(g.last_check_nodes)
                        if not ok:
                            failure = _OrderingFailed(CYCLE_ON_ORDERING)
                        else:
                            for f in g.get_all_followers(tx.txid):
                                fnode = g.nodes.get(f)
                                if fnode is None:
                                    continue
                                for ident2, entry in fnode.read_set.items():
                                    if ident2 != ident:
                                        found.append((ident2, entry[0]))
                            recv = wg.merge_from(g, since_rev=recv,
                                                 skip=self._aborted)
                            sync[ident] = (wg.rev, recv)
                    self._mark_dirty(rec)
                except BaseException as e:   # record latch errors fail closed
                    failure = e
                with cond:
                    if failure is not None:
                        if state["failure"] is None:
                            state["failure"] = failure
                    else:
                        done.add(ident)
                        for ident2, rec2 in found:
                            if ident2 not in done and ident2 not in queued:
                                targets.append((ident2, rec2))
                                queued.add(ident2)
                    state["inflight"] -= 1
                    cond.notify_all()
            with cond:
                results.append(wg)

        n = min(self.validators, max(1, len(targets)))
        threads = [threading.Thread(target=body, name=f"validator-{i}")
                   for i in range(n - 1)]
        for t in threads:
            t.start()
        body()
        for t in threads:
            t.join()
        failure = state["failure"]
        if failure is not None:
            if isinstance(failure, _OrderingFailed):
                raise failure
            raise _OrderingFailed(CYCLE_ON_ORDERING) from failure
        for wg in results:
            tx.graph.merge_from(wg, skip=self._aborted)
        ok = tx.graph.is_acyclic(tx.txid)
        self.stats.note_cycle_check(tx.graph.last_check_nodes)
        if not ok:
            raise _OrderingFailed(CYCLE_ON_ORDERING)

    def abort(self, tx: OzeTx) -> None:
        if tx.status != ACTIVE:
            return
        with self._ab_lock:
            self._aborted[tx.txid] = txid_epoch(tx.txid)
        for rec, ver in tx.inserted:
            with rec.latch:
                ver.state = VersionState.ABORTED
                unlink_version(rec, ver)
        for rec in tx.touched.values():
            with rec.latch:
                if rec.graph is not None:
                    rec.graph.purge(tx.txid)
        self._finish(tx, ABORTED)
        self.stats.note_abort()
        if self.history is not None:
            self.history.on_abort(tx.txid)

    def collect(self) -> None:
        self._heartbeat_idle_workers()
        with self._admin:
            if not self._live:
                return
        reclamation = self.epochs.reclamation_epoch()
        with self._dirty_lock:
            batch = list(self._dirty)
            self._dirty.clear()
        survivors = []
        for rec in batch:
            with rec.latch:
                g = rec.graph
                pinned = None
                if g is not None:
                    g.clean(reclamation)
                    ident = rec.ident
                    pinned = set()
                    for node in g.nodes.values():
                        entry = node.read_set.get(ident)
                        if entry is not None:
                            pinned.add(entry[1])
                gc_versions(rec, reclamation, pinned)
                if (g is not None and g.node_count() > 0) or \
                        rec.chain_length() > 1:
                    survivors.append(rec)
        if survivors:
            with self._dirty_lock:
                self._dirty.update(survivors)
        with self._ab_lock:
            floor = reclamation - ABORT_REGISTRY_SLACK
            if floor > 0:
                self._aborted = {t: e for t, e in self._aborted.items()
                                 if e > floor}
