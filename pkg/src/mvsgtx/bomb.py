"""Manufacturing cost-management workload over the transaction engines.

Seven tables model factories, items, per-factory production, the
bill-of-materials forest, raw-material costs, rolled-up product costs, and
journal vouchers. One long transaction (L1) rebuilds every product's
material tree and rolls its cost up; five short transactions (S1–S5)
update raw-material costs, post vouchers, and — in dynamic mode — replace
products, swap raw materials, and retune production quantities.

All randomness a transaction needs is drawn before it starts and captured
in its closure, so re-executing the same transaction (retries, or the
locking engine's two-pass execution) replays identical choices. Reads
whose values steer the key set (scans, tree links) are marked structural.
"""
from __future__ import annotations

import itertools
import random
import struct
import threading
import time
from dataclasses import dataclass, replace
from typing import Callable, Optional

from .engine import DelayedContext, Engine, TxContext
from .storage import decode_key, encode_key, prefix_range

FACTORY = "factory"
ITEM = "item"
PRODUCT = "product"
BOM = "bom"
MATERIAL_COST = "material-cost"
RESULT_COST = "result-cost"
JOURNAL_VOUCHER = "journal-voucher"

TABLES = (FACTORY, ITEM, PRODUCT, BOM, MATERIAL_COST, RESULT_COST,
          JOURNAL_VOUCHER)

ITEM_PRODUCT, ITEM_MATERIAL, ITEM_RAW = 0, 1, 2
WORK_IN_PROCESS = 0xFFFF  # credit account for posted vouchers

STATIC_KINDS = ("L1", "S1", "S2")
DYNAMIC_KINDS = ("L1", "S1", "S2", "S3", "S4", "S5")

_F64 = struct.Struct(">d")
_F64X2 = struct.Struct(">dd")
_VOUCHER = struct.Struct(">qqqd")   # date, debit item, credit account, amount
_ITEM = struct.Struct(">h")         # type, then the name bytes


@dataclass(frozen=True)
class BombParams:
    """Workload sizing; defaults model the reference manufacturer."""

    factories: int = 8
    product_types: int = 72_000
    material_types: int = 198_000
    raw_material_types: int = 75_000
    material_trees_per_product: int = 5
    material_tree_size: int = 10
    raw_materials_per_leaf: int = 3
    target_products: int = 100
    target_materials: int = 1

    def __post_init__(self) -> None:
        for name, value in self.__dict__.items():
            if value < 1:
                raise ValueError(f"{name} must be positive, got {value}")
        if self.target_products > self.product_types:
            raise ValueError("target_products exceeds product_types")
        if self.raw_materials_per_leaf > self.raw_material_types:
            raise ValueError("raw_materials_per_leaf exceeds "
                             "raw_material_types")
        if self.material_trees_per_product > self.tree_count:
            raise ValueError("material_trees_per_product exceeds the "
                             "number of material trees")

    @classmethod
    def desk(cls, **overrides) -> "BombParams":
        """1/100-scale preset used by the acceptance experiments."""
        base = cls(factories=2, product_types=720, material_types=1_980,
                   raw_material_types=750, material_trees_per_product=5,
                   material_tree_size=10, raw_materials_per_leaf=3,
                   target_products=20, target_materials=1)
        return replace(base, **overrides) if overrides else base

    # id-space partitions: products, then materials, then raw materials
    @property
    def material_base(self) -> int:
        return self.product_types

    @property
    def raw_base(self) -> int:
        return self.product_types + self.material_types

    @property
    def tree_count(self) -> int:
        full, rest = divmod(self.material_types, self.material_tree_size)
        return full + (1 if rest else 0)

    def is_raw(self, item_id: int) -> bool:
        return item_id >= self.raw_base


class BomNode:
    __slots__ = ("item_id", "quantity", "unit_cost", "children")

    def __init__(self, item_id: int, quantity: float,
                 unit_cost: float = 0.0) -> None:
        self.item_id = item_id
        self.quantity = quantity
        self.unit_cost = unit_cost
        self.children: list[BomNode] = []


def calculate_cost(node: BomNode) -> float:
    """Roll a tree's cost up: leaves contribute unit cost × quantity,
    interior nodes the sum of their children × their own quantity."""
    if not node.children:
        return node.unit_cost * node.quantity
    subtotal = 0.0
    for child in node.children:
        subtotal += calculate_cost(child)
    return subtotal * node.quantity


class BombData:
    """Loader output: the cacheable facts generators may use without
    reading them transactionally (item-id allocation, initial bill rows)."""

    __slots__ = ("params", "tree_roots", "leaf_links", "factory_products",
                 "raw_ids", "short_tree", "_item_alloc", "_voucher_locals")

    def __init__(self, params: BombParams, tree_roots: list,
                 leaf_links: list, factory_products: dict,
                 raw_ids: range, short_tree: bool) -> None:
        self.params = params
        self.tree_roots = tree_roots
        self.leaf_links = leaf_links
        self.factory_products = factory_products
        self.raw_ids = raw_ids
        self.short_tree = short_tree
        self._item_alloc = itertools.count(params.raw_base
                                           + params.raw_material_types)
        self._voucher_locals: dict[int, "itertools.count"] = {}

    def next_item_id(self) -> int:
        return next(self._item_alloc)

    def next_voucher_id(self, worker: int) -> int:
        counter = self._voucher_locals.get(worker)
        if counter is None:
            counter = self._voucher_locals.setdefault(
                worker, itertools.count())
        return (worker << 40) | next(counter)


def load(db, params: BombParams, seed: int) -> BombData:
    """Populate the seven tables and build the material forest.

    Deterministic for a given seed. Trees consume the material ids in
    shuffled chunks of material_tree_size (the last tree runs short when
    the division is uneven); every leaf material gets
    raw_materials_per_leaf distinct raw materials; every product gets
    material_trees_per_product distinct trees; every factory manufactures
    target_products distinct products.
    """
    rng = random.Random(seed)
    for name in TABLES:
        db.create_table(name)

    products = range(params.product_types)
    materials = range(params.material_base, params.raw_base)
    raws = range(params.raw_base, params.raw_base
                 + params.raw_material_types)

    db.bulk_load(FACTORY, ((encode_key(f), b"factory-%d" % f)
                           for f in range(params.factories)))
    db.bulk_load(ITEM, _item_rows(products, materials, raws))

    bom_rows: list = []
    tree_roots: list = []
    leaf_links: list = []
    shuffled = list(materials)
    rng.shuffle(shuffled)
    size = params.material_tree_size
    for start in range(0, len(shuffled), size):
        chunk = shuffled[start:start + size]
        root = chunk[0]
        tree_roots.append(root)
        nodes = [root]
        has_child = set()
        for m in chunk[1:]:
            parent = rng.choice(nodes)
            bom_rows.append((encode_key(parent, m),
                             _F64.pack(rng.uniform(1.0, 5.0))))
            has_child.add(parent)
            nodes.append(m)
        for leaf in (n for n in nodes if n not in has_child):
            for raw in rng.sample(raws, params.raw_materials_per_leaf):
                bom_rows.append((encode_key(leaf, raw),
                                 _F64.pack(rng.uniform(1.0, 5.0))))
                leaf_links.append((leaf, raw))

    for p in products:
        for root in rng.sample(tree_roots,
                               params.material_trees_per_product):
            bom_rows.append((encode_key(p, root),
                             _F64.pack(rng.uniform(1.0, 5.0))))
    db.bulk_load(BOM, bom_rows)

    factory_products: dict = {}
    product_rows, result_rows = [], []
    for f in range(params.factories):
        chosen = sorted(rng.sample(products, params.target_products))
        factory_products[f] = chosen
        for p in chosen:
            product_rows.append((encode_key(f, p),
                                 _F64.pack(float(rng.randint(1, 10)))))
            result_rows.append((encode_key(f, p), _F64.pack(0.0)))
    db.bulk_load(PRODUCT, product_rows)
    db.bulk_load(RESULT_COST, result_rows)

    db.bulk_load(MATERIAL_COST,
                 ((encode_key(f, r),
                   _F64X2.pack(rng.uniform(10.0, 100.0),
                               rng.uniform(100.0, 1000.0)))
                  for f in range(params.factories) for r in raws))

    return BombData(params, tree_roots, leaf_links, factory_products,
                    raws, short_tree=bool(params.material_types
                                          % params.material_tree_size))


def _item_rows(products, materials, raws):
    for ids, kind in ((products, ITEM_PRODUCT), (materials, ITEM_MATERIAL),
                      (raws, ITEM_RAW)):
        for i in ids:
            yield (encode_key(i), _ITEM.pack(kind) + b"item-%d" % i)


# ---------------------------------------------------------------------------
# transaction logic
# ---------------------------------------------------------------------------

def _children(ctx: TxContext, item_id: int) -> list:
    """(child_id, quantity) rows under one bill-of-materials parent; the
    result steers which records get visited next, hence structural."""
    lo, hi = prefix_range(item_id)
    return [(decode_key(key)[1], _F64.unpack(payload)[0])
            for key, payload in ctx.scan(BOM, lo, hi, structural=True)]


def build_tree(ctx: TxContext, params: BombParams, factory: int,
               product_id: int, warn: Optional[list] = None) -> BomNode:
    """Recursively rebuild one product's material tree from the bill rows,
    pricing leaves from the factory's raw-material costs."""
    root = BomNode(product_id, 1.0)
    stack = [root]
    while stack:
        node = stack.pop()
        for child_id, quantity in _children(ctx, node.item_id):
            child = BomNode(child_id, quantity)
            node.children.append(child)
            if params.is_raw(child_id):
                payload = ctx.read(MATERIAL_COST, encode_key(factory, child_id))
                if payload is not None:
                    sq, sa = _F64X2.unpack(payload)
                    if sq > 0:
                        child.unit_cost = sa / sq
                    elif warn is not None:
                        warn.append(child_id)
            else:
                stack.append(child)
    return root


def make_l1(data: BombData, rng: random.Random) -> Callable:
    """Roll up and store the cost of every product of one factory."""
    params = data.params
    factory = rng.randrange(params.factories)

    def logic(ctx: TxContext):
        lo, hi = prefix_range(factory)
        rows = ctx.scan(PRODUCT, lo, hi, structural=True)
        written = 0
        for key, _payload in rows:
            product_id = decode_key(key)[1]
            tree = build_tree(ctx, params, factory, product_id)
            cost = calculate_cost(tree)
            ctx.write(RESULT_COST, encode_key(factory, product_id),
                      _F64.pack(cost))
            written += 1
        return written

    return logic


def make_s1(data: BombData, rng: random.Random) -> Callable:
    """Read-modify-write the stock of target_materials raw materials."""
    params = data.params
    factory = rng.randrange(params.factories)
    picks = [(raw, rng.uniform(-0.1, 0.1))
             for raw in rng.sample(data.raw_ids, params.target_materials)]

    def logic(ctx: TxContext):
        for raw, fraction in picks:
            key = encode_key(factory, raw)
            payload = ctx.read(MATERIAL_COST, key)
            if payload is None:
                continue
            sq, sa = _F64X2.unpack(payload)
            sq = max(sq * (1.0 + fraction), 0.01)
            ctx.write(MATERIAL_COST, key, _F64X2.pack(sq, sa))

    return logic


def make_s2(data: BombData, rng: random.Random, worker: int) -> Callable:
    """Post one journal voucher per product cost of one factory."""
    factory = rng.randrange(data.params.factories)
    vouchers: list = []   # per-closure cache so re-execution reuses the ids

    def logic(ctx: TxContext):
        lo, hi = prefix_range(factory)
        rows = ctx.scan(RESULT_COST, lo, hi, structural=True)
        for i, (key, payload) in enumerate(rows):
            product_id = decode_key(key)[1]
            amount = _F64.unpack(payload)[0] * 1.0
            if i == len(vouchers):
                vouchers.append(data.next_voucher_id(worker))
            ctx.insert(JOURNAL_VOUCHER, encode_key(vouchers[i]),
                       _VOUCHER.pack(0, product_id, WORK_IN_PROCESS, amount))
        return len(rows)

    return logic


def make_s3(data: BombData, rng: random.Random) -> Callable:
    """Replace a random product of one factory with a newly developed one
    built on freshly chosen root materials (ids come from the cache)."""
    params = data.params
    factory = rng.randrange(params.factories)
    pick = rng.random()
    new_id = data.next_item_id()
    roots = [(root, rng.uniform(1.0, 5.0))
             for root in rng.sample(data.tree_roots,
                                    params.material_trees_per_product)]
    quantity = float(rng.randint(1, 10))

    def logic(ctx: TxContext):
        lo, hi = prefix_range(factory)
        rows = ctx.scan(PRODUCT, lo, hi, structural=True)
        if not rows:
            return None
        old_key = rows[int(pick * len(rows))][0]
        ctx.delete(PRODUCT, old_key)
        ctx.insert(PRODUCT, encode_key(factory, new_id), _F64.pack(quantity))
        for root, q in roots:
            ctx.insert(BOM, encode_key(new_id, root), _F64.pack(q))
        return new_id

    return logic


def make_s4(data: BombData, rng: random.Random) -> Callable:
    """Swap one leaf material's raw material for a different one."""
    leaf, old_raw = rng.choice(data.leaf_links)
    new_raw = rng.choice(data.raw_ids)
    while new_raw == old_raw:
        new_raw = rng.choice(data.raw_ids)
    quantity = rng.uniform(1.0, 5.0)

    def logic(ctx: TxContext):
        ctx.delete(BOM, encode_key(leaf, old_raw))
        ctx.insert(BOM, encode_key(leaf, new_raw), _F64.pack(quantity))

    return logic


def make_s5(data: BombData, rng: random.Random) -> Callable:
    """Retune the manufacturing quantity of one existing product."""
    params = data.params
    factory = rng.randrange(params.factories)
    product_id = rng.choice(data.factory_products[factory])
    quantity = float(rng.randint(1, 10))

    def logic(ctx: TxContext):
        key = encode_key(factory, product_id)
        if ctx.read(PRODUCT, key, structural=True) is None:
            return False     # replaced meanwhile; nothing to retune
        ctx.write(PRODUCT, key, _F64.pack(quantity))
        return True

    return logic


_MAKERS = {"L1": make_l1, "S1": make_s1, "S3": make_s3, "S4": make_s4,
           "S5": make_s5}


# ---------------------------------------------------------------------------
# the mixed-kind runner
# ---------------------------------------------------------------------------

class KindMetrics:
    __slots__ = ("commits", "aborts", "latency_ns", "max_latency_ns",
                 "histogram")

    #: histogram bucket i counts latencies in [2^i, 2^(i+1)) microseconds
    BUCKETS = 24

    def __init__(self) -> None:
        self.commits = 0
        self.aborts = 0
        self.latency_ns = 0
        self.max_latency_ns = 0
        self.histogram = [0] * self.BUCKETS

    def note(self, committed: bool, aborts: int, ns: int) -> None:
        if committed:
            self.commits += 1
        self.aborts += aborts
        self.latency_ns += ns
        if ns > self.max_latency_ns:
            self.max_latency_ns = ns
        us = max(ns // 1000, 1)
        self.histogram[min(us.bit_length() - 1, self.BUCKETS - 1)] += 1

    @property
    def abort_rate(self) -> float:
        total = self.commits + self.aborts
        return self.aborts / total if total else 0.0


class BombMetrics:
    def __init__(self, kinds, duration_s: float) -> None:
        self.kinds = {k: KindMetrics() for k in kinds}
        self.duration_s = duration_s
        self._lock = threading.Lock()

    def note(self, kind: str, committed: bool, aborts: int,
             ns: int) -> None:
        with self._lock:
            self.kinds[kind].note(committed, aborts, ns)

    def throughput_tpm(self, kind: str) -> float:
        return self.kinds[kind].commits / self.duration_s * 60.0

    def snapshot(self) -> dict:
        return {
            kind: {
                "commits": m.commits,
                "aborts": m.aborts,
                "abort_rate": round(m.abort_rate, 6),
                "throughput_tpm": round(self.throughput_tpm(kind), 3),
                "mean_latency_ms": round(
                    m.latency_ns / max(m.commits + m.aborts, 1) / 1e6, 3),
                "max_latency_ms": round(m.max_latency_ns / 1e6, 3),
            }
            for kind, m in self.kinds.items()
        }


#: kinds whose transactions run long enough to span the deadline; their
#: invocations get a bounded retry budget so a failed submission surfaces
#: as a measurable result instead of spinning forever
LONG_KINDS = frozenset({"L1"})
LONG_RETRY_BOUND = 10


def run_bomb(engine: Engine, data: BombData, mode: str, duration_s: float,
             seed: int, thread_plan: Optional[dict] = None,
             delay_us: int = 0) -> BombMetrics:
    """Drive the workload for a wall-clock window: one generator thread
    per kind at minimum (static mode runs L1/S1/S2, dynamic all six),
    extra threads per the plan. Returns per-kind metrics.

    Short-kind generators keep issuing until every long-kind thread has
    drained its final invocation, so a long transaction that straddles the
    deadline still completes against a live system rather than an idle
    one; completions during the drain are counted in the totals."""
    kinds = STATIC_KINDS if mode == "static" else DYNAMIC_KINDS
    plan = {k: 1 for k in kinds}
    for kind, n in (thread_plan or {}).items():
        if kind not in plan:
            raise ValueError(f"kind {kind!r} not active in {mode} mode")
        if n < 1:
            raise ValueError("every active kind needs at least one thread")
        plan[kind] = n
    metrics = BombMetrics(kinds, duration_s)
    deadline = time.monotonic() + duration_s
    delay_s = delay_us / 1e6
    longs_done = threading.Event()

    def generator(kind: str, worker: int) -> None:
        rng = random.Random(seed * 1_000_003 + worker * 7 +
                            kinds.index(kind))
        is_long = kind in LONG_KINDS
        retries = LONG_RETRY_BOUND if is_long else None
        while time.monotonic() < deadline or (
                not is_long and not longs_done.is_set()):
            if kind == "S2":
                logic = make_s2(data, rng, worker)
            else:
                logic = _MAKERS[kind](data, rng)
            run = logic if delay_s == 0 else (
                lambda ctx, logic=logic:
                logic(DelayedContext(ctx, delay_s)))
            t0 = time.perf_counter_ns()
            res = engine.run_transaction(worker, run, max_retries=retries)
            metrics.note(kind, res.committed, res.aborts,
                         time.perf_counter_ns() - t0)

    long_threads, short_threads = [], []
    worker = 0
    for kind in kinds:
        for _ in range(plan[kind]):
            worker += 1
            group = long_threads if kind in LONG_KINDS else short_threads
            group.append(threading.Thread(
                target=generator, args=(kind, worker),
                name=f"bomb-{kind}-{worker}", daemon=True))
    for th in long_threads + short_threads:
        th.start()
    for th in long_threads:
        th.join()
    longs_done.set()
    for th in short_threads:
        th.join()
    return metrics
