"""Multi-version serialization graph.

Each node tracks a transaction's outgoing reads-from edges (``read_follower``:
transactions that read my writes), outgoing version-order edges
(``write_follower``: transactions that must follow me in the serialization
order), incoming-edge sources (``from_ids``), and the set of records the
transaction has read with the exact version it read. Acyclicity of the graph
certifies that the committed schedule stays view-serializable.

Graphs support delta merging: every mutation bumps a graph-local revision and
appends to a journal, so copying one graph into another only walks nodes
changed since the last synchronization point. Node objects are never shared
between graphs; a merge copies state under the destination's latch.
"""
from __future__ import annotations

from bisect import bisect_right
from typing import Callable, Iterable, Optional

from .core import format_txid, txid_epoch

RecordIdent = tuple[str, bytes]


class TxNode:
    __slots__ = ("txid", "read_follower", "write_follower", "from_ids",
                 "read_set", "rev")

    def __init__(self, txid: int) -> None:
        self.txid = txid
        self.read_follower: set[int] = set()
        self.write_follower: set[int] = set()
        self.from_ids: set[int] = set()
        # record ident -> (record, version) the transaction read
        self.read_set: dict[RecordIdent, tuple] = {}
        self.rev = 0

    def followers(self) -> set[int]:
        return self.read_follower | self.write_follower

    def __repr__(self) -> str:  # debug aid only
        return f"TxNode({format_txid(self.txid)})"


class Mvsg:
    """A serialization graph instance (global, per-record, or per-transaction).

    ``track_readers`` enables a record-ident -> reader-txids index used by the
    centralized engine, where scanning every node per written record would be
    too slow; per-record graphs stay small and scan instead.
    """

    __slots__ = ("nodes", "rev", "journal", "readers_index", "last_check_nodes")

    def __init__(self, track_readers: bool = False) -> None:
        self.nodes: dict[int, TxNode] = {}
        self.rev = 0
        # (rev, txid) per mutation; compacted when it outgrows the node map
        self.journal: list[tuple[int, int]] = []
        self.readers_index: Optional[dict[RecordIdent, set[int]]] = (
            {} if track_readers else None)
        self.last_check_nodes = 0

    # -- bookkeeping ------------------------------------------------------

    def _touch(self, node: TxNode) -> None:
        self.rev += 1
        node.rev = self.rev
        self.journal.append((self.rev, node.txid))
        if len(self.journal) > 64 and len(self.journal) > 4 * len(self.nodes):
            self._compact_journal()

    def _compact_journal(self) -> None:
        self.journal = sorted((n.rev, t) for t, n in self.nodes.items())

    def ensure_node(self, txid: int) -> TxNode:
        node = self.nodes.get(txid)
        if node is None:
            node = TxNode(txid)
            self.nodes[txid] = node
            self._touch(node)
        return node

    def node_count(self) -> int:
        return len(self.nodes)

    def edge_count(self) -> int:
        return sum(len(n.read_follower) + len(n.write_follower)
                   for n in self.nodes.values())

    # -- edge operations ---------------------------------------------------

    def add_reads_from_edge(self, writer: int, reader: int) -> None:
        """writer -> reader: the reader consumed the writer's version."""
        if writer == reader:
            return
        w = self.ensure_node(writer)
        r = self.ensure_node(reader)
        w.read_follower.add(reader)
        r.from_ids.add(writer)
        self._touch(w)
        self._touch(r)

    def remove_reads_from_edge(self, writer: int, reader: int) -> None:
        w = self.nodes.get(writer)
        r = self.nodes.get(reader)
        if w is not None:
            w.read_follower.discard(reader)
            # keep from_ids consistent: drop only if no other edge w->r remains
            if r is not None and reader not in w.write_follower:
                r.from_ids.discard(writer)
            self._touch(w)
            if r is not None:
                self._touch(r)

    def add_write_follower_edge(self, src: int, dst: int) -> None:
        """src -> dst: dst must follow src in the serialization order."""
        if src == dst:
            return
        s = self.ensure_node(src)
        d = self.ensure_node(dst)
        s.write_follower.add(dst)
        d.from_ids.add(src)
        self._touch(s)
        self._touch(d)

    def remove_write_follower_edge(self, src: int, dst: int) -> None:
        s = self.nodes.get(src)
        d = self.nodes.get(dst)
        if s is not None:
            s.write_follower.discard(dst)
            if d is not None and dst not in s.read_follower:
                d.from_ids.discard(src)
            self._touch(s)
            if d is not None:
                self._touch(d)

    def record_read(self, txid: int, ident: RecordIdent, record, version) -> None:
        node = self.ensure_node(txid)
        node.read_set[ident] = (record, version)
        if self.readers_index is not None:
            self.readers_index.setdefault(ident, set()).add(txid)
        self._touch(node)

    # -- queries -----------------------------------------------------------

    def is_acyclic(self, focus: int) -> bool:
        """True iff no directed cycle passes through ``focus``.

        Every protocol step that could introduce a cycle adds an edge incident
        to the acting transaction or merges that transaction's constraints, so
        checking cycles through it is sufficient (and keeps the check local).
        """
        nodes = self.nodes
        start = nodes.get(focus)
        if start is None:
            self.last_check_nodes = 0
            return True
        stack = list(start.read_follower)
        stack.extend(start.write_follower)
        seen = set(stack)
        visited = 1
        while stack:
            tid = stack.pop()
            if tid == focus:
                self.last_check_nodes = visited
                return False
            node = nodes.get(tid)
            visited += 1
            if node is None:
                continue
            for nxt in node.read_follower:
                if nxt == focus:
                    self.last_check_nodes = visited
                    return False
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
            for nxt in node.write_follower:
                if nxt == focus:
                    self.last_check_nodes = visited
                    return False
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
        self.last_check_nodes = visited
        return True

    def get_all_followers(self, txid: int) -> set[int]:
        """Transitive closure over follower edges, excluding ``txid`` itself."""
        nodes = self.nodes
        start = nodes.get(txid)
        if start is None:
            return set()
        stack = list(start.read_follower)
        stack.extend(start.write_follower)
        out: set[int] = set()
        while stack:
            tid = stack.pop()
            if tid in out or tid == txid:
                continue
            out.add(tid)
            node = nodes.get(tid)
            if node is None:
                continue
            stack.extend(node.read_follower)
            stack.extend(node.write_follower)
        return out

    def find_readers(self, ident: RecordIdent) -> list[int]:
        """Transactions whose read set contains the record (any state)."""
        if self.readers_index is not None:
            return list(self.readers_index.get(ident, ()))
        return [t for t, n in self.nodes.items() if ident in n.read_set]

    def find_followers(self, ident: RecordIdent, readers: Iterable[int]) -> set[int]:
        """Creators of the versions the given readers read from the record."""
        out: set[int] = set()
        for r in readers:
            node = self.nodes.get(r)
            if node is None:
                continue
            entry = node.read_set.get(ident)
            if entry is not None:
                out.add(entry[1].txid)
        return out

    # -- merge -------------------------------------------------------------

    def merge_from(self, src: "Mvsg", since_rev: int = 0,
                   skip: Optional[set[int]] = None) -> int:
        """Union ``src``'s nodes changed after ``since_rev`` into this graph.

        Returns src.rev at merge time; pass it back as ``since_rev`` on the
        next merge from the same source to copy only the delta. ``skip`` holds
        txids aborted elsewhere that must not be resurrected here.

        Merging is a union, so an edge removal on the source never propagates.
        Callers keep that sound by confining every tentative-edge add/remove
        pair to one latch session on the source (no peer merges mid-session)
        and by handling aborts with explicit purges plus the skip registry.
        """
        if src is self:
            return src.rev
        journal = src.journal
        start = bisect_right(journal, (since_rev, 0xFFFFFFFFFFFFFFFF))
        if start >= len(journal):
            return src.rev
        seen: set[int] = set()
        nodes = self.nodes
        for i in range(start, len(journal)):
            txid = journal[i][1]
            if txid in seen:
                continue
            seen.add(txid)
            snode = src.nodes.get(txid)
            if snode is None:
                continue
            if skip is not None and txid in skip:
                continue
            dnode = nodes.get(txid)
            if dnode is None:
                dnode = TxNode(txid)
                nodes[txid] = dnode
                dnode.read_follower = set(snode.read_follower)
                dnode.write_follower = set(snode.write_follower)
                dnode.from_ids = set(snode.from_ids)
                dnode.read_set = dict(snode.read_set)
            else:
                dnode.read_follower |= snode.read_follower
                dnode.write_follower |= snode.write_follower
                dnode.from_ids |= snode.from_ids
                dnode.read_set.update(snode.read_set)
            self._touch(dnode)
        return src.rev

    # -- removal -----------------------------------------------------------

    def purge(self, txid: int) -> None:
        """Remove a transaction's node and every edge incident to it.

        Used on abort: the transaction's tentative constraints must stop
        influencing other transactions' cycle checks.
        """
        node = self.nodes.pop(txid, None)
        if node is None:
            return
        nodes = self.nodes
        for src in node.from_ids:
            other = nodes.get(src)
            if other is not None:
                other.read_follower.discard(txid)
                other.write_follower.discard(txid)
                self._touch(other)
        for dst in node.followers():
            other = nodes.get(dst)
            if other is not None:
                other.from_ids.discard(txid)
                self._touch(other)
        if self.readers_index is not None:
            for ident in node.read_set:
                readers = self.readers_index.get(ident)
                if readers is not None:
                    readers.discard(txid)
                    if not readers:
                        del self.readers_index[ident]
        # journal entries for the removed txid resolve to missing nodes and
        # are skipped by merge_from
        self.rev += 1

    def clean(self, reclamation: int) -> list[int]:
        """Drop nodes at or below the reclamation epoch with no live influence.

        A node is removable when its epoch is <= reclamation, every follower's
        epoch (taken from the follower txid itself, so missing follower nodes
        still count) is also <= reclamation, and nothing points into it.
        Removal erases the node's id from its followers' from-sets, which can
        in turn unpin the followers, so passes repeat (oldest node first) until
        none is removable: one call drains every settled cascade.
        """
        removed: list[int] = []
        nodes = self.nodes
        while True:
            removed_this_pass = 0
            for txid in sorted(nodes.keys()):
                node = nodes.get(txid)
                if node is None or txid_epoch(txid) > reclamation:
                    continue
                if node.from_ids:
                    # From-entries whose source epoch is reclaimable AND whose
                    # node is gone reference already-reclaimed transactions
                    # (merged-in stale state); they must not pin this node
                    # forever.
                    dead = [s for s in node.from_ids
                            if txid_epoch(s) <= reclamation and s not in nodes]
                    if dead:
                        node.from_ids.difference_update(dead)
                        self._touch(node)
                    if node.from_ids:
                        continue
                keep = False
                for f in node.read_follower:
                    if txid_epoch(f) > reclamation:
                        keep = True
                        break
                if not keep:
                    for f in node.write_follower:
                        if txid_epoch(f) > reclamation:
                            keep = True
                            break
                if keep:
                    continue
                for f in node.followers():
                    other = nodes.get(f)
                    if other is not None:
                        other.from_ids.discard(txid)
                        self._touch(other)
                if self.readers_index is not None:
                    for ident in node.read_set:
                        readers = self.readers_index.get(ident)
                        if readers is not None:
                            readers.discard(txid)
                            if not readers:
                                del self.readers_index[ident]
                del nodes[txid]
                removed.append(txid)
                removed_this_pass += 1
            if not removed_this_pass:
                break
        if removed:
            self.rev += 1
            if len(self.journal) > 4 * len(nodes):
                self._compact_journal()
        return removed

    # -- debug -------------------------------------------------------------

    def dump(self) -> str:
        """Stable debug text: one line per node, ids ascending.

        Format: ``txid: RF=[...] WF=[...] FROM=[...] RS=[keys]``.
        """
        lines = []
        for txid in sorted(self.nodes):
            n = self.nodes[txid]
            rf = ",".join(format_txid(t) for t in sorted(n.read_follower))
            wf = ",".join(format_txid(t) for t in sorted(n.write_follower))
            fr = ",".join(format_txid(t) for t in sorted(n.from_ids))
            rs = ",".join(f"{t}/{k.hex()}" for t, k in sorted(n.read_set))
            lines.append(f"{format_txid(txid)}: RF=[{rf}] WF=[{wf}] "
                         f"FROM=[{fr}] RS=[{rs}]")
        return "\n".join(lines)
