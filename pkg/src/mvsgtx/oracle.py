"""History recording and multi-version view-serializability checking.

A History collects the events of one run into per-thread append-only
buffers: begin, read (with the creator of the version read), write (emitted
at version-install time with the version's neighbors in its record's
version order), commit, and abort. Engines emit install events while
holding the latch that serializes installs on that record, so the global
sequence numbers of same-key installs match their true order and the
per-key version order can be replayed offline.

check_mvsr decides whether the committed part of a history is equivalent
to some serial one-version-at-a-time execution that preserves every
reads-from relationship:

* graph mode (default, polynomial) builds the multi-version serialization
  graph over the recorded version order — reads-from edges plus, for every
  read and every other writer of that key, the edge forced by whether the
  writer's version sits below or above the version read — and reports a
  topological order as witness when acyclic, a concrete cycle otherwise.
* permutation mode searches serial orders directly (every read must see
  the most recently placed writer), which decides the property over all
  possible version orders. It is exponential and guarded by a bound; it
  exists to validate the graph builder and to distinguish "not serializable
  under the recorded order" from "not serializable under any order".
"""
from __future__ import annotations

import itertools
import threading
from typing import Iterable, Optional

from .core import GENESIS_TXID, format_txid, pack_txid

BEGIN = "begin"
READ = "read"
WRITE = "write"
COMMIT = "commit"
ABORT = "abort"

_KINDS = (BEGIN, READ, WRITE, COMMIT, ABORT)


class InvalidHistory(Exception):
    """The event log cannot describe any execution (malformed or truncated)."""


class Verdict:
    """Outcome of a serializability check.

    ``witness`` (when serializable) is a serial order of the committed
    transaction ids; ``cycle`` (when not, graph mode only) is a list of
    (src, dst) edges forming a cycle in the serialization graph.
    """

    __slots__ = ("serializable", "witness", "cycle")

    def __init__(self, serializable: bool,
                 witness: Optional[list] = None,
                 cycle: Optional[list] = None) -> None:
        self.serializable = serializable
        self.witness = witness
        self.cycle = cycle

    def __repr__(self) -> str:
        if self.serializable:
            order = ",".join(format_txid(t) for t in self.witness or [])
            return f"Verdict(serializable, witness=[{order}])"
        return f"Verdict(not serializable, cycle={self.cycle})"


class History:
    """Per-thread append-only event recording for one run.

    Events are (seq, txid, kind, ident, a, b) tuples where ident is a
    (table, key) pair or None; for reads ``a`` is the creator of the
    version read; for writes ``a``/``b`` are the creators of the versions
    directly above/below the installed version (None when none). Exceeding
    ``capacity`` events in any one thread flags the run invalid rather
    than blocking or dropping silently.
    """

    def __init__(self, capacity: int = 1_000_000) -> None:
        self.capacity = capacity
        self.overflowed = False
        self._seq = itertools.count()
        self._local = threading.local()
        self._buffers: list[list] = []
        self._reg = threading.Lock()

    # -- recording (engine-facing hooks) ---------------------------------------

    def _emit(self, txid: int, kind: str, ident, a, b) -> None:
        buf = getattr(self._local, "buf", None)
        if buf is None:
            buf = []
            self._local.buf = buf
            with self._reg:
                self._buffers.append(buf)
        if len(buf) >= self.capacity:
            self.overflowed = True
            return
        buf.append((next(self._seq), txid, kind, ident, a, b))

    def on_begin(self, txid: int) -> None:
        self._emit(txid, BEGIN, None, None, None)

    def on_read(self, txid: int, table: str, key: bytes,
                creator: int) -> None:
        self._emit(txid, READ, (table, key), creator, None)

    def on_install(self, txid: int, table: str, key: bytes,
                   above: Optional[int], below: Optional[int]) -> None:
        """Version installed into (table, key)'s order; caller holds the
        latch that serializes installs on that record."""
        self._emit(txid, WRITE, (table, key), above, below)

    def on_commit(self, txid: int, idents: Iterable) -> None:
        self._emit(txid, COMMIT, None, None, None)

    def on_abort(self, txid: int) -> None:
        self._emit(txid, ABORT, None, None, None)

    # -- offline views -----------------------------------------------------------

    def events(self) -> list:
        with self._reg:
            merged = [ev for buf in self._buffers for ev in buf]
        merged.sort()
        return merged

    def dump(self) -> str:
        """Line-oriented `seq txid kind key creator` rendering."""
        lines = []
        for seq, txid, kind, ident, a, b in self.events():
            key = "-" if ident is None else _render_ident(ident)
            if kind == READ:
                extra = format_txid(a)
            elif kind == WRITE:
                extra = "%s,%s" % (_opt_txid(a), _opt_txid(b))
            else:
                extra = "-"
            lines.append(f"{seq} {format_txid(txid)} {kind} {key} {extra}")
        return "\n".join(lines) + ("\n" if lines else "")

    @classmethod
    def parse(cls, text: str) -> "History":
        h = cls()
        buf: list = []
        h._buffers.append(buf)
        for n, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 5:
                raise InvalidHistory(f"line {n}: expected 5 fields")
            seq_s, txid_s, kind, key_s, extra = parts
            if kind not in _KINDS:
                raise InvalidHistory(f"line {n}: unknown kind {kind!r}")
            ident = None if key_s == "-" else _parse_ident(n, key_s)
            a = b = None
            if kind == READ:
                a = parse_txid(extra)
            elif kind == WRITE:
                above_s, _, below_s = extra.partition(",")
                a = None if above_s == "-" else parse_txid(above_s)
                b = None if below_s == "-" else parse_txid(below_s)
            try:
                seq = int(seq_s)
            except ValueError:
                raise InvalidHistory(f"line {n}: bad sequence {seq_s!r}")
            buf.append((seq, parse_txid(txid_s), kind, ident, a, b))
        return h


def parse_txid(text: str) -> int:
    try:
        e, w, c = (int(p) for p in text.split("."))
        return pack_txid(e, w, c)
    except ValueError:
        raise InvalidHistory(f"bad transaction id {text!r}") from None


def _opt_txid(t: Optional[int]) -> str:
    return "-" if t is None else format_txid(t)


def _render_ident(ident) -> str:
    table, key = ident
    return f"{table}/{key.hex()}"


def _parse_ident(n: int, text: str):
    table, sep, keyhex = text.rpartition("/")
    if not sep or not table:
        raise InvalidHistory(f"line {n}: bad key {text!r}")
    try:
        return (table, bytes.fromhex(keyhex))
    except ValueError:
        raise InvalidHistory(f"line {n}: bad key {text!r}") from None


# ---------------------------------------------------------------------------
# replaying the recorded execution
# ---------------------------------------------------------------------------

class _Replay:
    """Committed transactions, their reads, and per-key version orders."""

    __slots__ = ("committed", "reads", "orders")

    def __init__(self, committed: set, reads: list, orders: dict) -> None:
        self.committed = committed     # set of txids
        self.reads = reads             # (reader, ident, creator) committed only
        self.orders = orders           # ident -> [txid oldest → newest], committed


def _replay(history) -> _Replay:
    if isinstance(history, History):
        if history.overflowed:
            raise InvalidHistory("event buffer overflowed; run is invalid")
        events = history.events()
    else:
        events = sorted(history)
    committed: set = set()
    aborted: set = set()
    reads: list = []
    chains: dict = {}         # ident -> [txid newest → oldest], live replay
    installs: dict = {}       # txid -> [ident, ...]
    for _seq, txid, kind, ident, a, b in events:
        if kind == WRITE:
            chain = chains.setdefault(ident, [])
            if a is None:
                chain.insert(0, txid)
            else:
                try:
                    at = chain.index(a)
                except ValueError:
                    raise InvalidHistory(
                        f"install by {format_txid(txid)} names an absent "
                        f"neighbor {format_txid(a)}") from None
                chain.insert(at + 1, txid)
            installs.setdefault(txid, []).append(ident)
        elif kind == READ:
            reads.append((txid, ident, a))
        elif kind == COMMIT:
            committed.add(txid)
        elif kind == ABORT:
            aborted.add(txid)
            for ident2 in installs.pop(txid, ()):
                try:
                    chains[ident2].remove(txid)
                except ValueError:
                    pass
    orders = {}
    for ident, chain in chains.items():
        kept = [t for t in reversed(chain) if t in committed]
        if kept:
            orders[ident] = kept
    creators = {ident: set(o) for ident, o in orders.items()}
    kept_reads = []
    for reader, ident, creator in reads:
        if reader not in committed:
            continue
        if creator != GENESIS_TXID \
                and creator not in creators.get(ident, ()):
            raise InvalidHistory(
                f"{format_txid(reader)} read a version of "
                f"{_render_ident(ident)} created by {format_txid(creator)}, "
                f"which is not in the committed version order")
        kept_reads.append((reader, ident, creator))
    return _Replay(committed, kept_reads, orders)


def final_versions(history) -> dict:
    """ident -> creator of the newest committed version, from replay alone."""
    r = _replay(history)
    return {ident: order[-1] for ident, order in r.orders.items()}


# ---------------------------------------------------------------------------
# graph mode: serialization graph over the recorded version order
# ---------------------------------------------------------------------------

def _build_graph(r: _Replay) -> dict:
    adj: dict = {t: set() for t in r.committed}
    for reader, ident, creator in r.reads:
        if creator != GENESIS_TXID and creator != reader:
            adj[creator].add(reader)
        order = r.orders.get(ident, ())
        pos = {t: i for i, t in enumerate(order)}
        # genesis sits below every installed version
        read_pos = -1 if creator == GENESIS_TXID else pos[creator]
        for other in order:
            if other == creator or other == reader:
                continue
            if pos[other] < read_pos:
                adj[other].add(creator)
            else:
                adj[reader].add(other)
    return adj


def _find_cycle(adj: dict) -> list:
    """One concrete cycle in a graph known to have one, as an edge list."""
    WHITE, GREY, BLACK = 0, 1, 2
    color = {t: WHITE for t in adj}
    for root in sorted(adj):
        if color[root] != WHITE:
            continue
        path = [root]
        iters = [iter(sorted(adj[root]))]
        color[root] = GREY
        while path:
            for nxt in iters[-1]:
                if color[nxt] == GREY:
                    start = path.index(nxt)
                    loop = path[start:] + [nxt]
                    return list(zip(loop, loop[1:]))
                if color[nxt] == WHITE:
                    color[nxt] = GREY
                    path.append(nxt)
                    iters.append(iter(sorted(adj[nxt])))
                    break
            else:
                color[path.pop()] = BLACK
                iters.pop()
    raise AssertionError("no cycle found in a cyclic graph")


def _topological_witness(adj: dict) -> Optional[list]:
    import heapq
    indeg = {t: 0 for t in adj}
    for src, dsts in adj.items():
        for d in dsts:
            indeg[d] += 1
    ready = [t for t, n in indeg.items() if n == 0]
    heapq.heapify(ready)
    out = []
    while ready:
        t = heapq.heappop(ready)
        out.append(t)
        for d in adj[t]:
            indeg[d] -= 1
            if indeg[d] == 0:
                heapq.heappush(ready, d)
    return out if len(out) == len(adj) else None


# ---------------------------------------------------------------------------
# permutation mode: direct search over serial orders
# ---------------------------------------------------------------------------

def _witness_search(r: _Replay) -> Optional[list]:
    """Backtracking search for a serial order in which every committed
    read sees the most recently placed writer of its key (the initial
    state when none). Decides serializability over all version orders."""
    reads_of: dict = {t: [] for t in r.committed}
    for reader, ident, creator in r.reads:
        reads_of[reader].append((ident, creator))
    writes_of: dict = {t: [] for t in r.committed}
    for ident, order in r.orders.items():
        for t in order:
            writes_of[t].append(ident)

    txids = sorted(r.committed)
    placed: list = []
    in_order: set = set()
    last_writer: dict = {}

    def runnable(t: int) -> bool:
        for ident, creator in reads_of[t]:
            if last_writer.get(ident, GENESIS_TXID) != creator:
                return False
        return True

    def step() -> bool:
        if len(placed) == len(txids):
            return True
        for t in txids:
            if t in in_order or not runnable(t):
                continue
            saved = [(ident, last_writer.get(ident))
                     for ident in writes_of[t]]
            for ident in writes_of[t]:
                last_writer[ident] = t
            placed.append(t)
            in_order.add(t)
            if step():
                return True
            in_order.discard(t)
            placed.pop()
            for ident, old in saved:
                if old is None:
                    last_writer.pop(ident, None)
                else:
                    last_writer[ident] = old
        return False

    return list(placed) if step() else None


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def check_mvsr(history, mode: str = "graph",
               permutation_bound: int = 12) -> Verdict:
    """Decide serializability of the committed part of ``history``.

    ``history`` is a History or an iterable of its event tuples. Graph
    mode answers for the recorded version order; permutation mode answers
    for all version orders and falls back to graph mode when more than
    ``permutation_bound`` transactions committed.
    """
    r = _replay(history)
    if mode == "permutation" and len(r.committed) > permutation_bound:
        mode = "graph"
    if mode == "graph":
        adj = _build_graph(r)
        witness = _topological_witness(adj)
        if witness is None:
            return Verdict(False, cycle=_find_cycle(adj))
        return Verdict(True, witness=witness)
    if mode == "permutation":
        witness = _witness_search(r)
        if witness is None:
            return Verdict(False)
        return Verdict(True, witness=witness)
    raise ValueError(f"unknown mode: {mode}")
