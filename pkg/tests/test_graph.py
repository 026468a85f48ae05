"""Serialization-graph structure: edges, cycle checks, merging, cleaning.

Oracles here are deliberately independent reimplementations: plain dict-of-set
edge models, breadth-first reachability, and brute-force unions, so the graph
code under test never verifies itself.
"""
from hypothesis import given, settings, strategies as st

from mvsgtx.core import pack_txid
from mvsgtx.graph import Mvsg, TxNode


class _FakeVersion:
    __slots__ = ("txid",)

    def __init__(self, txid: int) -> None:
        self.txid = txid


# -- independent oracles -----------------------------------------------------

def model_edges(graph: Mvsg) -> set[tuple[int, int, str]]:
    out = set()
    for t, n in graph.nodes.items():
        for d in n.read_follower:
            out.add((t, d, "rf"))
        for d in n.write_follower:
            out.add((t, d, "wf"))
    return out


def oracle_cycle_through(edges: set[tuple[int, int]], focus: int) -> bool:
    """BFS reachability: a cycle passes through focus iff focus is reachable
    from one of its successors."""
    succ: dict[int, list[int]] = {}
    for a, b in edges:
        succ.setdefault(a, []).append(b)
    frontier = list(succ.get(focus, []))
    seen = set(frontier)
    while frontier:
        nxt = []
        for t in frontier:
            if t == focus:
                return True
            for d in succ.get(t, []):
                if d not in seen:
                    seen.add(d)
                    nxt.append(d)
        frontier = nxt
    return focus in seen


def oracle_closure(edges: set[tuple[int, int]], start: int) -> set[int]:
    succ: dict[int, list[int]] = {}
    for a, b in edges:
        succ.setdefault(a, []).append(b)
    out: set[int] = set()
    frontier = list(succ.get(start, []))
    while frontier:
        t = frontier.pop()
        if t == start or t in out:
            continue
        out.add(t)
        frontier.extend(succ.get(t, []))
    return out


# op encoding: (kind, a, b) over a small txid universe
ops_strategy = st.lists(
    st.tuples(st.integers(0, 3), st.integers(1, 6), st.integers(1, 6)),
    max_size=60,
)


def apply_ops(graph: Mvsg, ops) -> tuple[set, set]:
    """Drive the graph and a dict-free model of expected edges in parallel."""
    rf: set[tuple[int, int]] = set()
    wf: set[tuple[int, int]] = set()
    for kind, a, b in ops:
        if kind == 0:
            graph.add_reads_from_edge(a, b)
            if a != b:
                rf.add((a, b))
        elif kind == 1:
            graph.add_write_follower_edge(a, b)
            if a != b:
                wf.add((a, b))
        elif kind == 2:
            graph.remove_reads_from_edge(a, b)
            rf.discard((a, b))
        else:
            graph.remove_write_follower_edge(a, b)
            wf.discard((a, b))
    return rf, wf


@settings(max_examples=300)
@given(ops_strategy)
def test_edges_match_model(ops):
    g = Mvsg()
    rf, wf = apply_ops(g, ops)
    assert model_edges(g) == {(a, b, "rf") for a, b in rf} | \
        {(a, b, "wf") for a, b in wf}


@settings(max_examples=300)
@given(ops_strategy)
def test_from_ids_is_transpose_of_followers(ops):
    g = Mvsg()
    apply_ops(g, ops)
    for t, n in g.nodes.items():
        for src in n.from_ids:
            assert t in g.nodes[src].followers()
    for t, n in g.nodes.items():
        for d in n.followers():
            assert t in g.nodes[d].from_ids


@settings(max_examples=300)
@given(ops_strategy, st.integers(1, 6))
def test_cycle_check_matches_bfs_oracle(ops, focus):
    g = Mvsg()
    rf, wf = apply_ops(g, ops)
    assert g.is_acyclic(focus) == (not oracle_cycle_through(rf | wf, focus))


@settings(max_examples=200)
@given(ops_strategy, st.integers(1, 6))
def test_follower_closure_matches_bfs_oracle(ops, start):
    g = Mvsg()
    rf, wf = apply_ops(g, ops)
    assert g.get_all_followers(start) == oracle_closure(rf | wf, start)


def test_self_edges_ignored():
    g = Mvsg()
    g.add_reads_from_edge(5, 5)
    g.add_write_follower_edge(5, 5)
    assert g.edge_count() == 0
    assert g.is_acyclic(5)


def test_removing_one_edge_kind_keeps_shared_from_entry():
    g = Mvsg()
    g.add_reads_from_edge(1, 2)
    g.add_write_follower_edge(1, 2)
    g.remove_reads_from_edge(1, 2)
    assert 1 in g.nodes[2].from_ids          # wf edge still holds it
    g.remove_write_follower_edge(1, 2)
    assert 1 not in g.nodes[2].from_ids


def test_find_readers_and_followers():
    g = Mvsg(track_readers=True)
    ident = ("items", b"\x01")
    v_a = _FakeVersion(7)
    v_b = _FakeVersion(9)
    g.record_read(11, ident, None, v_a)
    g.record_read(12, ident, None, v_b)
    g.record_read(13, ("items", b"\x02"), None, v_a)
    assert sorted(g.find_readers(ident)) == [11, 12]
    assert g.find_followers(ident, [11, 12]) == {7, 9}
    assert g.find_followers(ident, [13]) == set()

    plain = Mvsg()                            # scan path, no index
    plain.record_read(11, ident, None, v_a)
    assert plain.find_readers(ident) == [11]


def test_purge_removes_node_and_incident_edges():
    g = Mvsg(track_readers=True)
    g.add_reads_from_edge(1, 2)
    g.add_write_follower_edge(2, 3)
    g.record_read(2, ("t", b"k"), None, _FakeVersion(1))
    g.purge(2)
    assert 2 not in g.nodes
    assert g.nodes[1].read_follower == set()
    assert g.nodes[3].from_ids == set()
    assert g.find_readers(("t", b"k")) == []


# -- merging ------------------------------------------------------------------

def brute_union(dst_tuples: dict, src: Mvsg, skip=None) -> dict:
    out = {t: (set(rf), set(wf), set(fr))
           for t, (rf, wf, fr) in dst_tuples.items()}
    for t, n in src.nodes.items():
        if skip and t in skip:
            continue
        cur = out.setdefault(t, (set(), set(), set()))
        cur[0].update(n.read_follower)
        cur[1].update(n.write_follower)
        cur[2].update(n.from_ids)
    return out


def graph_as_tuples(g: Mvsg) -> dict:
    return {t: (set(n.read_follower), set(n.write_follower), set(n.from_ids))
            for t, n in g.nodes.items()}


@settings(max_examples=200)
@given(ops_strategy, ops_strategy)
def test_full_merge_matches_brute_union(ops_a, ops_b):
    a, b = Mvsg(), Mvsg()
    apply_ops(a, ops_a)
    apply_ops(b, ops_b)
    expect = brute_union(graph_as_tuples(a), b)
    a.merge_from(b)
    assert graph_as_tuples(a) == expect


add_only_ops = st.lists(
    st.tuples(st.integers(0, 1), st.integers(1, 6), st.integers(1, 6)),
    max_size=60,
)


@settings(max_examples=200)
@given(ops_strategy, ops_strategy, add_only_ops)
def test_delta_merge_equals_one_full_merge(ops_a, ops_b1, ops_b2):
    """Merging twice with the returned sync point == merging once at the end.

    Holds while the source only grows between syncs; removals never propagate
    through a union merge, which the engine guarantees by keeping tentative
    add/remove pairs inside one latch session on the source graph.
    """
    src = Mvsg()
    apply_ops(src, ops_b1)

    staged, oneshot = Mvsg(), Mvsg()
    apply_ops(staged, ops_a)
    apply_ops(oneshot, ops_a)

    seen = staged.merge_from(src)
    apply_ops(src, ops_b2)
    staged.merge_from(src, since_rev=seen)
    oneshot.merge_from(src)
    assert graph_as_tuples(staged) == graph_as_tuples(oneshot)


def test_merge_skips_registered_aborters():
    src = Mvsg()
    src.add_reads_from_edge(1, 2)
    src.add_write_follower_edge(3, 4)
    dst = Mvsg()
    dst.merge_from(src, skip={3})
    assert 3 not in dst.nodes
    # node 4 still arrives with its from-entry; the engine-level abort path
    # purges 3 from every graph it touched, the skip set only blocks copies
    assert dst.nodes[4].from_ids == {3}


def test_merge_copies_read_sets_and_is_self_noop():
    src = Mvsg()
    v = _FakeVersion(5)
    src.record_read(8, ("t", b"k"), None, v)
    dst = Mvsg()
    dst.merge_from(src)
    assert dst.nodes[8].read_set[("t", b"k")][1] is v
    rev = dst.rev
    assert dst.merge_from(dst) == rev
    assert dst.rev == rev


def test_merged_nodes_are_not_shared_objects():
    src = Mvsg()
    src.add_reads_from_edge(1, 2)
    dst = Mvsg()
    dst.merge_from(src)
    dst.nodes[1].read_follower.add(9)
    assert 9 not in src.nodes[1].read_follower


# -- cleaning -----------------------------------------------------------------

def tid(epoch: int, counter: int) -> int:
    return pack_txid(epoch, 0, counter)


def test_clean_keeps_node_with_young_follower():
    g = Mvsg()
    old, young = tid(1, 1), tid(5, 1)
    g.add_reads_from_edge(old, young)
    assert g.clean(reclamation=3) == []
    assert old in g.nodes


def test_clean_removes_old_chain_in_one_pass_either_insertion_order():
    # age-ordered visiting: the older node's removal clears its from-entry on
    # the younger one before the younger is visited, whichever was added first
    for b_first in (False, True):
        g = Mvsg()
        a, b = tid(1, 1), tid(1, 2)
        if b_first:
            g.ensure_node(b)
        g.add_write_follower_edge(a, b)
        removed = g.clean(reclamation=2)
        assert removed == [a, b]
        assert g.nodes == {}


def test_clean_drains_preposed_tangle_in_one_call():
    # forwarding points young -> old, so the old node is unpinned only after
    # the young one goes; the fixpoint loop finishes the cascade in one call
    g = Mvsg()
    young, old = tid(1, 5), tid(1, 1)
    g.add_write_follower_edge(young, old)
    assert g.clean(reclamation=2) == [young, old]
    assert g.nodes == {}


def test_clean_drops_stale_from_entry_to_absent_old_node():
    g = Mvsg()
    gone, n = tid(1, 1), tid(1, 2)
    node = g.ensure_node(n)
    node.from_ids.add(gone)                 # merged-in edge; source reclaimed
    assert g.clean(reclamation=2) == [n]


def test_clean_keeps_from_entry_to_absent_young_node():
    g = Mvsg()
    pending, n = tid(9, 1), tid(1, 1)
    node = g.ensure_node(n)
    node.from_ids.add(pending)              # constraint source not merged yet
    assert g.clean(reclamation=2) == []
    assert n in g.nodes


def test_clean_scrubs_readers_index():
    g = Mvsg(track_readers=True)
    t = tid(1, 1)
    g.record_read(t, ("t", b"k"), None, _FakeVersion(0))
    g.clean(reclamation=2)
    assert g.find_readers(("t", b"k")) == []


# -- protocol-shaped replay ----------------------------------------------------

def test_postpose_cycle_resolved_by_preposing():
    """Edge-level replay of the four-transaction cross-read pattern: two
    writers each read the other's committed write target, the second
    committer's postposing attempt cycles, and redirecting it to a preposing
    edge restores acyclicity with exactly one serial order."""
    g = Mvsg()
    t1, t2, t3, t4 = 1, 2, 3, 4
    g.add_reads_from_edge(t1, t3)           # t3 read t1's write
    g.add_reads_from_edge(t2, t4)           # t4 read t2's write

    # t3 commits a write over the record t4 read: postpose t4 -> t3
    g.add_write_follower_edge(t4, t3)
    assert g.is_acyclic(t3)

    # t4 commits a write over the record t3 read: postposing t3 -> t4 cycles
    g.add_write_follower_edge(t3, t4)
    assert not g.is_acyclic(t4)
    g.remove_write_follower_edge(t3, t4)

    # prepose t4 before the creator of the version t3 read
    g.add_write_follower_edge(t4, t1)
    assert g.is_acyclic(t4)

    assert unique_topo_order(g) == [t2, t4, t1, t3]


def unique_topo_order(g: Mvsg):
    """Kahn's algorithm; returns None when more than one order exists."""
    indeg = {t: 0 for t in g.nodes}
    for n in g.nodes.values():
        for d in n.followers():
            indeg[d] += 1
    out = []
    ready = [t for t, d in indeg.items() if d == 0]
    while ready:
        if len(ready) != 1:
            return None
        t = ready.pop()
        out.append(t)
        for d in g.nodes[t].followers():
            indeg[d] -= 1
            if indeg[d] == 0:
                ready.append(d)
    return out if len(out) == len(g.nodes) else None


def test_dump_renders_sorted_stable_text():
    g = Mvsg()
    a, b = pack_txid(1, 0, 1), pack_txid(1, 0, 2)
    g.add_reads_from_edge(a, b)
    g.record_read(b, ("t", b"\x01"), None, _FakeVersion(a))
    expect = ("1.0.1: RF=[1.0.2] WF=[] FROM=[] RS=[]\n"
              "1.0.2: RF=[] WF=[] FROM=[1.0.1] RS=[t/01]")
    assert g.dump() == expect


def test_node_and_edge_counts():
    g = Mvsg()
    g.add_reads_from_edge(1, 2)
    g.add_write_follower_edge(1, 3)
    assert g.node_count() == 3
    assert g.edge_count() == 2


def test_cycle_check_reports_visited_nodes():
    g = Mvsg()
    for i in range(1, 6):
        g.add_write_follower_edge(i, i + 1)
    g.is_acyclic(1)
    assert g.last_check_nodes >= 5
