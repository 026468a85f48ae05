"""Engine core: transaction identifiers, epoch management, versions, records.

Transaction identifiers are 64-bit integers packing (epoch, worker, counter)
so that the integer order equals the lexicographic order of the triple. The
epoch component is maintained by a dedicated ticker thread and drives both
the order-forwarding boundary and garbage-collection reclamation.
"""
from __future__ import annotations

import threading
from enum import IntEnum
from typing import Optional

EPOCH_BITS = 32
WORKER_BITS = 8
COUNTER_BITS = 24

MAX_EPOCH = (1 << EPOCH_BITS) - 1
MAX_WORKER = (1 << WORKER_BITS) - 1
MAX_COUNTER = (1 << COUNTER_BITS) - 1

# Creator id shared by every bulk-loaded version and lazily-created tombstone:
# semantically the initial transaction that wrote the starting state of every key.
GENESIS_TXID = 0


def pack_txid(epoch: int, worker: int, counter: int) -> int:
    """Pack (epoch, worker, counter) into one 64-bit word.

    Integer comparison of packed ids equals lexicographic comparison of the
    triples, which is what the ordering protocol relies on.
    """
    if not (0 <= epoch <= MAX_EPOCH):
        raise ValueError(f"epoch out of range: {epoch}")
    if not (0 <= worker <= MAX_WORKER):
        raise ValueError(f"worker out of range: {worker}")
    if not (0 <= counter <= MAX_COUNTER):
        raise ValueError(f"counter out of range: {counter}")
    return (epoch << (WORKER_BITS + COUNTER_BITS)) | (worker << COUNTER_BITS) | counter


def txid_epoch(txid: int) -> int:
    return txid >> (WORKER_BITS + COUNTER_BITS)


def txid_worker(txid: int) -> int:
    return (txid >> COUNTER_BITS) & MAX_WORKER


def txid_counter(txid: int) -> int:
    return txid & MAX_COUNTER


def unpack_txid(txid: int) -> tuple[int, int, int]:
    return (txid_epoch(txid), txid_worker(txid), txid_counter(txid))


def format_txid(txid: int) -> str:
    e, w, c = unpack_txid(txid)
    return f"{e}.{w}.{c}"


class VersionState(IntEnum):
    PENDING = 0
    COMMITTED = 1
    ABORTED = 2


class Version:
    """One version in a record's chain.

    ``prev`` points to the next-older version in the serialization order
    (which order forwarding may decouple from creation order). ``payload``
    of None marks a tombstone: the key reads as absent.
    """

    __slots__ = ("txid", "payload", "state", "prev")

    def __init__(self, txid: int, payload: Optional[bytes],
                 state: VersionState = VersionState.PENDING,
                 prev: Optional["Version"] = None) -> None:
        self.txid = txid
        self.payload = payload
        self.state = state
        self.prev = prev

    @property
    def epoch(self) -> int:
        return txid_epoch(self.txid)

    def __repr__(self) -> str:  # debug aid only
        return (f"Version({format_txid(self.txid)}, "
                f"{self.state.name}, tomb={self.payload is None})")


class Record:
    """A record cell: identity, version chain head, latch, per-record graph.

    ``graph`` is populated only by the decentralized engine; ``rw`` is a
    reader-writer lock slot used only by the 2PL baseline. ``latest`` is the
    newest version in serialization order (chain scans go latest -> prev).
    """

    __slots__ = ("table_name", "key", "latest", "latch", "graph", "rw")

    def __init__(self, table_name: str, key: bytes,
                 latest: Optional[Version] = None) -> None:
        self.table_name = table_name
        self.key = key
        self.latest = latest
        self.latch = threading.Lock()
        self.graph = None
        self.rw = None

    @property
    def ident(self) -> tuple[str, bytes]:
        return (self.table_name, self.key)

    def chain(self) -> list[Version]:
        """Versions newest-to-oldest in serialization order (debug/GC use)."""
        out = []
        v = self.latest
        while v is not None:
            out.append(v)
            v = v.prev
        return out

    def chain_length(self) -> int:
        n = 0
        v = self.latest
        while v is not None:
            n += 1
            v = v.prev
        return n

    def __repr__(self) -> str:  # debug aid only
        return f"Record({self.table_name}, {self.key!r})"


class EpochManager:
    """Global epoch counter plus per-worker local epochs.

    The ticker thread advances the global epoch at a fixed interval. Workers
    copy the global epoch into their local slot at transaction begin and on
    idle heartbeats; the reclamation epoch is min(local epochs) - 1, so a
    worker that never refreshed would stall reclamation (hence heartbeats).
    """

    def __init__(self, interval_ms: float = 40.0) -> None:
        self.interval_ms = interval_ms
        self._epoch = 1
        self._local: dict[int, int] = {}
        self._lock = threading.Lock()
        self._ticker: Optional[threading.Thread] = None
        self._stop = threading.Event()

    @property
    def epoch(self) -> int:
        return self._epoch

    def register_worker(self, worker: int) -> None:
        with self._lock:
            self._local[worker] = self._epoch

    def unregister_worker(self, worker: int) -> None:
        with self._lock:
            self._local.pop(worker, None)

    def refresh(self, worker: int) -> int:
        """Copy the global epoch into the worker's local slot; returns it."""
        e = self._epoch
        self._local[worker] = e
        return e

    def local_epoch(self, worker: int) -> int:
        return self._local[worker]

    def tick(self) -> int:
        with self._lock:
            if self._epoch >= MAX_EPOCH:
                raise OverflowError("epoch counter saturated")
            self._epoch += 1
            return self._epoch

    def reclamation_epoch(self) -> int:
        """min(worker local epochs) - 1; raises if no workers registered."""
        locals_ = self._local
        if not locals_:
            raise RuntimeError("reclamation epoch undefined: no workers registered")
        return min(locals_.values()) - 1

    def start(self) -> None:
        if self._ticker is not None:
            return
        self._stop.clear()

        def run() -> None:
            while not self._stop.wait(self.interval_ms / 1000.0):
                self.tick()

        self._ticker = threading.Thread(target=run, name="epoch-ticker", daemon=True)
        self._ticker.start()

    def stop(self) -> None:
        if self._ticker is None:
            return
        self._stop.set()
        self._ticker.join()
        self._ticker = None


class TxIdAllocator:
    """Per-worker transaction-id source.

    The counter resets whenever the worker's epoch moves forward and grows
    strictly within one epoch, so packed ids from one worker are strictly
    increasing. Counter saturation forces an epoch tick rather than erroring:
    unreachable at benchmark scale but cheap to keep correct.
    """

    def __init__(self, manager: EpochManager, worker: int) -> None:
        if not (0 <= worker <= MAX_WORKER):
            raise ValueError(f"worker out of range: {worker}")
        self.manager = manager
        self.worker = worker
        self._epoch = 0
        self._counter = 0
        manager.register_worker(worker)

    def next_txid(self) -> int:
        e = self.manager.refresh(self.worker)
        if e != self._epoch:
            self._epoch = e
            self._counter = 0
        if self._counter > MAX_COUNTER:
            e = self.manager.tick()
            self.manager.refresh(self.worker)
            self._epoch = e
            self._counter = 0
        txid = pack_txid(self._epoch, self.worker, self._counter)
        self._counter += 1
        return txid
