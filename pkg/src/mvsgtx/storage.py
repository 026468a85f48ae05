"""Storage: ordered tables of record cells with version chains.

Keys are fixed-width big-endian concatenations of integer parts, so the byte
order of composite keys equals the tuple order of their parts and range scans
over a prefix work with plain byte bounds. Cells are never physically removed:
deletion writes a tombstone version (payload None) and the cell remains in the
index, reading as absent.

Every bulk-loaded version and every lazily-created baseline tombstone carries
the shared genesis creator id: semantically one initial transaction wrote the
starting state of all keys. An insert therefore reads the genesis tombstone
(or whatever committed version is current) before buffering its write, giving
racing inserts of one key a reads-from conflict instead of a silent blind-write
race.
"""
from __future__ import annotations

import struct
import threading
from typing import Iterable, Iterator, Optional

from sortedcontainers import SortedDict

from .core import GENESIS_TXID, Record, Version, VersionState, txid_epoch

KEY_PART_WIDTH = 8
_PACKER = struct.Struct(">Q")


def encode_key(*parts: int) -> bytes:
    """Big-endian fixed-width concatenation; sorts like the integer tuple."""
    out = bytearray()
    for p in parts:
        if p < 0:
            raise ValueError(f"key parts must be non-negative: {p}")
        out += _PACKER.pack(p)
    return bytes(out)


def decode_key(key: bytes) -> tuple[int, ...]:
    if len(key) % KEY_PART_WIDTH:
        raise ValueError("key length is not a multiple of the part width")
    return tuple(_PACKER.unpack_from(key, i)[0]
                 for i in range(0, len(key), KEY_PART_WIDTH))


def prefix_range(*parts: int) -> tuple[bytes, bytes]:
    """[lo, hi) byte bounds covering every key extending the given prefix.

    ``hi`` is the integer successor of the prefix bytes, so extensions of any
    depth sort strictly inside the bounds. A prefix with every part at the
    maximum has no same-width successor and is rejected.
    """
    lo = encode_key(*parts)
    succ = int.from_bytes(lo, "big") + 1
    if succ >> (8 * len(lo)):
        raise ValueError("prefix has no upper bound: all parts at maximum")
    return lo, succ.to_bytes(len(lo), "big")


class Table:
    """One ordered key space. The structural latch guards index mutation."""

    def __init__(self, name: str) -> None:
        self.name = name
        self.index: SortedDict = SortedDict()
        self.latch = threading.Lock()

    def get_record(self, key: bytes) -> Optional[Record]:
        return self.index.get(key)

    def get_or_create(self, key: bytes) -> Record:
        """Return the cell, creating it with a committed genesis tombstone.

        The tombstone makes a fresh cell read as absent through the normal
        version-scan path and gives inserts an absence dependency to read.
        """
        rec = self.index.get(key)
        if rec is not None:
            return rec
        with self.latch:
            rec = self.index.get(key)
            if rec is None:
                rec = Record(self.name, key,
                             Version(GENESIS_TXID, None, VersionState.COMMITTED))
                self.index[key] = rec
        return rec

    def range_records(self, lo: bytes, hi: bytes) -> list[Record]:
        """Records with lo <= key < hi, snapshot under the structural latch."""
        with self.latch:
            return [self.index[k] for k in self.index.irange(lo, hi,
                                                             inclusive=(True, False))]

    def all_records(self) -> list[Record]:
        with self.latch:
            return list(self.index.values())

    def __len__(self) -> int:
        return len(self.index)


class Database:
    def __init__(self) -> None:
        self.tables: dict[str, Table] = {}

    def create_table(self, name: str) -> Table:
        if name in self.tables:
            raise ValueError(f"table exists: {name}")
        t = Table(name)
        self.tables[name] = t
        return t

    def table(self, name: str) -> Table:
        return self.tables[name]

    def bulk_load(self, name: str, items: Iterable[tuple[bytes, bytes]]) -> int:
        """Non-transactional load of committed genesis versions."""
        t = self.tables[name]
        n = 0
        for key, payload in items:
            t.index[key] = Record(t.name, key,
                                  Version(GENESIS_TXID, payload,
                                          VersionState.COMMITTED))
            n += 1
        return n

    def iter_records(self) -> Iterator[Record]:
        for t in self.tables.values():
            yield from t.all_records()

    def dump_committed(self) -> dict[str, dict[bytes, bytes]]:
        """Latest committed non-tombstone payload per key, for differential
        comparison across engines. Caller must ensure quiescence."""
        out: dict[str, dict[bytes, bytes]] = {}
        for name, t in self.tables.items():
            snap: dict[bytes, bytes] = {}
            for rec in t.all_records():
                v = rec.latest
                while v is not None and v.state != VersionState.COMMITTED:
                    v = v.prev
                if v is not None and v.payload is not None:
                    snap[rec.key] = v.payload
            out[name] = snap
        return out


# -- version-chain surgery (caller holds the record latch) -----------------

def insert_version_latest(record: Record, version: Version) -> None:
    version.prev = record.latest
    record.latest = version


def insert_version_before(record: Record, anchor: Version, version: Version) -> bool:
    """Splice ``version`` immediately older than ``anchor`` in the chain.

    Returns False when the anchor is no longer linked (should not happen while
    live read sets pin their versions; callers abort defensively on False).
    """
    v = record.latest
    while v is not None:
        if v is anchor:
            version.prev = anchor.prev
            anchor.prev = version
            return True
        v = v.prev
    return False


def unlink_version(record: Record, version: Version) -> bool:
    """Remove a version from the chain (abort path)."""
    if record.latest is version:
        record.latest = version.prev
        return True
    v = record.latest
    while v is not None:
        if v.prev is version:
            v.prev = version.prev
            return True
        v = v.prev
    return False


def gc_versions(record: Record, reclamation: int,
                pinned: Optional[set] = None) -> int:
    """Unlink committed versions at or below the reclamation epoch.

    The chain-latest version always stays (it remains readable regardless of
    age); versions referenced by live read sets are pinned by the caller so
    that order-forwarding anchors stay spliceable.
    """
    holder = record.latest
    if holder is None:
        return 0
    removed = 0
    v = holder.prev
    while v is not None:
        if (v.state == VersionState.COMMITTED
                and txid_epoch(v.txid) <= reclamation
                and (pinned is None or v not in pinned)):
            holder.prev = v.prev
            removed += 1
            v = holder.prev
        else:
            holder = v
            v = v.prev
    return removed
