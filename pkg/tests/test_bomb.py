"""Workload module tests.

Cost roll-ups are checked against an independent iterative fold written
directly from the pricing rules; loaded-state row counts are recomputed by
hand from the sizing parameters; transaction effects are verified against
offline recomputations over the committed state.
"""
import random
import struct

import pytest

from mvsgtx import bomb
from mvsgtx.bomb import (
    BOM, FACTORY, ITEM, JOURNAL_VOUCHER, MATERIAL_COST, PRODUCT, RESULT_COST,
    WORK_IN_PROCESS, BombParams, BomNode, calculate_cost, load, run_bomb,
)
from mvsgtx.engine import make_engine
from mvsgtx.storage import Database, decode_key, encode_key

_F64 = struct.Struct(">d")
_F64X2 = struct.Struct(">dd")
_VOUCHER = struct.Struct(">qqqd")

SMALL = BombParams(factories=2, product_types=40, material_types=60,
                   raw_material_types=30, material_trees_per_product=2,
                   material_tree_size=5, raw_materials_per_leaf=2,
                   target_products=5, target_materials=1)


def fresh(engine_name="oze-central", params=SMALL, seed=11):
    db = Database()
    data = load(db, params, seed=seed)
    kw = {} if engine_name in ("occ", "d2pl") else {"epoch_interval_ms": None}
    return db, data, make_engine(engine_name, db, **kw)


def committed(db, table):
    return db.dump_committed()[table]


def fold_cost(node):
    """Independent roll-up: iterative post-order over the same tree."""
    totals = {}
    order, stack = [], [node]
    while stack:
        n = stack.pop()
        order.append(n)
        stack.extend(n.children)
    for n in reversed(order):
        if n.children:
            totals[id(n)] = sum(totals[id(c)] for c in n.children) * n.quantity
        else:
            totals[id(n)] = n.unit_cost * n.quantity
    return totals[id(node)]


def offline_costs(db, params, factory):
    """Recompute every product cost of one factory straight from the
    committed rows, without going through an engine."""
    bom_rows = committed(db, BOM)
    costs = committed(db, MATERIAL_COST)
    children = {}
    for key, payload in bom_rows.items():
        parent, child = decode_key(key)
        children.setdefault(parent, []).append(
            (child, _F64.unpack(payload)[0]))

    def unit_cost(raw):
        sq, sa = _F64X2.unpack(costs[encode_key(factory, raw)])
        return sa / sq if sq > 0 else 0.0

    def build(item, quantity):
        node = BomNode(item, quantity)
        if params.is_raw(item):
            node.unit_cost = unit_cost(item)
            return node
        for child, q in children.get(item, ()):
            node.children.append(build(child, q))
        return node

    out = {}
    for key in committed(db, PRODUCT):
        f, p = decode_key(key)
        if f == factory:
            out[p] = calculate_cost(build(p, 1.0))
    return out


class TestParams:
    def test_reference_scale_defaults(self):
        p = BombParams()
        assert (p.factories, p.product_types, p.material_types,
                p.raw_material_types) == (8, 72_000, 198_000, 75_000)
        assert (p.material_trees_per_product, p.material_tree_size,
                p.raw_materials_per_leaf) == (5, 10, 3)
        assert (p.target_products, p.target_materials) == (100, 1)
        assert p.tree_count == 19_800

    def test_desk_preset(self):
        p = BombParams.desk()
        assert (p.factories, p.product_types, p.material_types,
                p.raw_material_types, p.target_products) == (2, 720, 1_980,
                                                             750, 20)
        assert p.tree_count == 198
        assert BombParams.desk(factories=4).factories == 4

    def test_id_space_partitions(self):
        p = SMALL
        assert p.material_base == 40
        assert p.raw_base == 100
        assert not p.is_raw(99)
        assert p.is_raw(100)

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError, match="factories"):
            BombParams(factories=0)

    def test_rejects_oversubscription(self):
        with pytest.raises(ValueError, match="target_products"):
            BombParams(product_types=10, target_products=11)
        with pytest.raises(ValueError, match="raw_materials_per_leaf"):
            BombParams(raw_material_types=2, raw_materials_per_leaf=3)
        with pytest.raises(ValueError, match="material_trees_per_product"):
            BombParams(material_types=20, material_tree_size=10,
                       material_trees_per_product=3)


class TestLoad:
    def test_row_counts_match_parameters(self):
        db, data, _ = fresh()
        p = SMALL
        assert len(committed(db, FACTORY)) == p.factories
        assert len(committed(db, ITEM)) == (p.product_types + p.material_types
                                            + p.raw_material_types)
        assert len(committed(db, PRODUCT)) == p.factories * p.target_products
        assert len(committed(db, RESULT_COST)) == (p.factories
                                                   * p.target_products)
        assert len(committed(db, MATERIAL_COST)) == (p.factories
                                                     * p.raw_material_types)
        assert len(committed(db, JOURNAL_VOUCHER)) == 0
        # every tree of size s contributes s-1 material links
        material_links = p.material_types - len(data.tree_roots)
        product_links = p.product_types * p.material_trees_per_product
        assert len(committed(db, BOM)) == (material_links
                                           + len(data.leaf_links)
                                           + product_links)

    def test_same_seed_is_identical(self):
        db1, data1, _ = fresh(seed=42)
        db2, data2, _ = fresh(seed=42)
        assert db1.dump_committed() == db2.dump_committed()
        assert data1.tree_roots == data2.tree_roots
        assert data1.leaf_links == data2.leaf_links
        assert data1.factory_products == data2.factory_products

    def test_different_seed_differs(self):
        db1, _, _ = fresh(seed=1)
        db2, _, _ = fresh(seed=2)
        assert committed(db1, BOM) != committed(db2, BOM)

    def test_result_costs_start_at_zero(self):
        db, _, _ = fresh()
        assert all(_F64.unpack(v)[0] == 0.0
                   for v in committed(db, RESULT_COST).values())

    def test_uneven_material_division_leaves_short_tree(self):
        p = BombParams(factories=1, product_types=4, material_types=7,
                       raw_material_types=6, material_trees_per_product=1,
                       material_tree_size=5, raw_materials_per_leaf=2,
                       target_products=2, target_materials=1)
        db = Database()
        data = load(db, p, seed=0)
        assert data.short_tree
        assert len(data.tree_roots) == 2

    def test_every_product_links_to_distinct_trees(self):
        db, data, _ = fresh()
        roots = set(data.tree_roots)
        per_product = {}
        for key in committed(db, BOM):
            parent, child = decode_key(key)
            if parent < SMALL.material_base:
                per_product.setdefault(parent, []).append(child)
        assert set(per_product) == set(range(SMALL.product_types))
        for children in per_product.values():
            assert len(children) == SMALL.material_trees_per_product
            assert len(set(children)) == len(children)
            assert set(children) <= roots


class TestCost:
    def test_leaf_cost(self):
        assert calculate_cost(BomNode(7, 2.0, unit_cost=3.0)) == 6.0

    def test_interior_cost(self):
        root = BomNode(1, 2.0)
        root.children = [BomNode(2, 2.0, unit_cost=1.0),
                         BomNode(3, 1.5, unit_cost=2.0)]
        assert calculate_cost(root) == 10.0  # (2*1 + 1.5*2) * 2

    def test_three_level_cost(self):
        leaf = BomNode(3, 4.0, unit_cost=0.5)      # 2.0
        mid = BomNode(2, 3.0)
        mid.children = [leaf]                       # 6.0
        root = BomNode(1, 1.0)
        root.children = [mid, BomNode(4, 1.0, unit_cost=1.0)]
        assert calculate_cost(root) == 7.0

    def test_rollup_matches_independent_fold(self):
        rng = random.Random(2024)
        for _ in range(60):
            def grow(depth):
                node = BomNode(rng.randrange(1000),
                               rng.uniform(0.5, 4.0),
                               unit_cost=rng.uniform(0.0, 9.0))
                if depth < 4 and rng.random() < 0.6:
                    node.children = [grow(depth + 1)
                                     for _ in range(rng.randint(1, 3))]
                return node

            tree = grow(0)
            assert calculate_cost(tree) == pytest.approx(fold_cost(tree),
                                                         rel=1e-12)


@pytest.fixture(params=["oze-central", "occ", "d2pl"])
def engine_name(request):
    return request.param


class TestTransactions:
    def test_l1_matches_offline_recompute(self, engine_name):
        db, data, eng = fresh(engine_name)
        factory = random.Random(5).randrange(SMALL.factories)
        res = eng.run_transaction(1, bomb.make_l1(data, random.Random(5)))
        assert res.committed and res.value == SMALL.target_products
        expected = offline_costs(db, SMALL, factory)
        rows = committed(db, RESULT_COST)
        for key, payload in rows.items():
            f, p = decode_key(key)
            got = _F64.unpack(payload)[0]
            if f == factory:
                assert got == pytest.approx(expected[p], rel=1e-12)
                assert got > 0.0
            else:
                assert got == 0.0
        eng.close()

    def test_l1_prices_exhausted_stock_at_zero(self):
        db, data, eng = fresh()
        factory = 0
        raws = range(SMALL.raw_base, SMALL.raw_base
                     + SMALL.raw_material_types)

        def drain(ctx):
            for raw in raws:
                ctx.write(MATERIAL_COST, encode_key(factory, raw),
                          _F64X2.pack(0.0, 500.0))

        assert eng.run_transaction(1, drain).committed

        def rebuild_first(ctx):
            warnings = []
            product = data.factory_products[factory][0]
            tree = bomb.build_tree(ctx, SMALL, factory, product,
                                   warn=warnings)
            return warnings, calculate_cost(tree)

        warnings, cost = eng.run_transaction(1, rebuild_first).value
        assert warnings and set(warnings) <= set(raws)
        assert cost == 0.0

        l1_seed = next(s for s in range(100)
                       if random.Random(s).randrange(SMALL.factories)
                       == factory)
        res = eng.run_transaction(1, bomb.make_l1(data,
                                                  random.Random(l1_seed)))
        assert res.committed
        for key, payload in committed(db, RESULT_COST).items():
            if decode_key(key)[0] == factory:
                assert _F64.unpack(payload)[0] == 0.0
        eng.close()

    def test_s1_applies_clamped_stock_update(self, engine_name):
        db, data, eng = fresh(engine_name)
        before = committed(db, MATERIAL_COST)
        seed = 6
        res = eng.run_transaction(1, bomb.make_s1(data, random.Random(seed)))
        assert res.committed
        rng = random.Random(seed)
        factory = rng.randrange(SMALL.factories)
        picks = [(raw, rng.uniform(-0.1, 0.1))
                 for raw in rng.sample(data.raw_ids, SMALL.target_materials)]
        after = committed(db, MATERIAL_COST)
        for raw, fraction in picks:
            key = encode_key(factory, raw)
            sq0, sa0 = _F64X2.unpack(before[key])
            sq1, sa1 = _F64X2.unpack(after[key])
            assert sq1 == pytest.approx(max(sq0 * (1.0 + fraction), 0.01))
            assert sa1 == sa0
        eng.close()

    def test_s1_floors_stock_at_minimum(self):
        db, data, eng = fresh()
        seed = next(s for s in range(1000) if _s1_fraction(s, data) < 0.0)
        rng = random.Random(seed)
        factory = rng.randrange(SMALL.factories)
        raw = rng.sample(data.raw_ids, 1)[0]

        def deplete(ctx):
            ctx.write(MATERIAL_COST, encode_key(factory, raw),
                      _F64X2.pack(0.005, 20.0))

        assert eng.run_transaction(1, deplete).committed
        assert eng.run_transaction(
            1, bomb.make_s1(data, random.Random(seed))).committed
        sq, _ = _F64X2.unpack(
            committed(db, MATERIAL_COST)[encode_key(factory, raw)])
        assert sq == 0.01
        eng.close()

    def test_s2_posts_one_voucher_per_product(self, engine_name):
        db, data, eng = fresh(engine_name)
        assert eng.run_transaction(
            1, bomb.make_l1(data, random.Random(5))).committed
        res = eng.run_transaction(
            3, bomb.make_s2(data, random.Random(7), worker=3))
        assert res.committed and res.value == SMALL.target_products
        factory = random.Random(7).randrange(SMALL.factories)
        result_rows = committed(db, RESULT_COST)
        vouchers = committed(db, JOURNAL_VOUCHER)
        assert len(vouchers) == SMALL.target_products
        ids = sorted(decode_key(k)[0] for k in vouchers)
        assert ids == [(3 << 40) | i for i in range(SMALL.target_products)]
        for payload in vouchers.values():
            _date, debit, credit, amount = _VOUCHER.unpack(payload)
            assert credit == WORK_IN_PROCESS
            cost = _F64.unpack(result_rows[encode_key(factory, debit)])[0]
            assert amount == pytest.approx(cost)
        eng.close()

    def test_s3_replaces_one_product(self, engine_name):
        db, data, eng = fresh(engine_name)
        before = set(committed(db, PRODUCT))
        res = eng.run_transaction(1, bomb.make_s3(data, random.Random(9)))
        assert res.committed
        new_id = res.value
        assert new_id >= SMALL.raw_base + SMALL.raw_material_types
        after = set(committed(db, PRODUCT))
        assert len(after) == len(before)
        added = after - before
        removed = before - after
        assert len(added) == 1 and len(removed) == 1
        factory = decode_key(next(iter(added)))[0]
        assert decode_key(next(iter(removed)))[0] == factory
        assert decode_key(next(iter(added)))[1] == new_id
        new_links = [decode_key(k)[1] for k in committed(db, BOM)
                     if decode_key(k)[0] == new_id]
        assert len(new_links) == SMALL.material_trees_per_product
        assert set(new_links) <= set(data.tree_roots)
        eng.close()

    def test_s4_swaps_one_raw_material_link(self, engine_name):
        db, data, eng = fresh(engine_name)
        rng = random.Random(13)
        leaf, old_raw = rng.choice(data.leaf_links)
        res = eng.run_transaction(1, bomb.make_s4(data, random.Random(13)))
        assert res.committed
        rows = committed(db, BOM)
        assert encode_key(leaf, old_raw) not in rows
        new_links = [decode_key(k)[1] for k in rows
                     if decode_key(k)[0] == leaf]
        assert len(new_links) == SMALL.raw_materials_per_leaf
        eng.close()

    def test_s5_retunes_quantity_and_skips_missing(self, engine_name):
        db, data, eng = fresh(engine_name)
        rng = random.Random(21)
        factory = rng.randrange(SMALL.factories)
        product = rng.choice(data.factory_products[factory])
        quantity = float(rng.randint(1, 10))
        res = eng.run_transaction(1, bomb.make_s5(data, random.Random(21)))
        assert res.committed and res.value is True
        key = encode_key(factory, product)
        assert _F64.unpack(committed(db, PRODUCT)[key])[0] == quantity

        assert eng.run_transaction(
            1, lambda ctx: ctx.delete(PRODUCT, key)).committed
        res = eng.run_transaction(1, bomb.make_s5(data, random.Random(21)))
        assert res.committed and res.value is False
        assert key not in committed(db, PRODUCT)
        eng.close()

    def test_voucher_ids_pack_worker_and_counter(self):
        _, data, _ = fresh()
        assert [data.next_voucher_id(2) for _ in range(3)] == [
            (2 << 40), (2 << 40) | 1, (2 << 40) | 2]
        assert data.next_voucher_id(5) == (5 << 40)
        assert data.next_voucher_id(2) == (2 << 40) | 3


def _s1_fraction(seed, data):
    rng = random.Random(seed)
    rng.randrange(SMALL.factories)
    rng.sample(data.raw_ids, SMALL.target_materials)
    return rng.uniform(-0.1, 0.1)


class TestRunBomb:
    def test_rejects_bad_thread_plans(self):
        _, data, eng = fresh("occ")
        with pytest.raises(ValueError, match="not active"):
            run_bomb(eng, data, "static", 0.05, seed=1,
                     thread_plan={"S3": 1})
        with pytest.raises(ValueError, match="at least one"):
            run_bomb(eng, data, "dynamic", 0.05, seed=1,
                     thread_plan={"L1": 0})
        eng.close()

    def test_static_run_preserves_catalog(self):
        db = Database()
        data = load(db, SMALL, seed=11)
        eng = make_engine("oze-central", db)
        products0 = set(committed(db, PRODUCT))
        bom0 = committed(db, BOM)
        metrics = run_bomb(eng, data, "static", duration_s=0.5, seed=3)
        eng.close()
        snap = metrics.snapshot()
        assert set(snap) == set(bomb.STATIC_KINDS)
        for kind in bomb.STATIC_KINDS:
            assert metrics.kinds[kind].commits >= 1, snap
            assert snap[kind]["throughput_tpm"] > 0
        assert set(committed(db, PRODUCT)) == products0
        assert committed(db, BOM) == bom0
        vouchers = committed(db, JOURNAL_VOUCHER)
        assert len(vouchers) == (metrics.kinds["S2"].commits
                                 * SMALL.target_products)

    def test_dynamic_run_touches_every_kind(self):
        db = Database()
        data = load(db, SMALL, seed=11)
        eng = make_engine("occ", db)
        metrics = run_bomb(eng, data, "dynamic", duration_s=0.5, seed=3)
        eng.close()
        assert set(metrics.snapshot()) == set(bomb.DYNAMIC_KINDS)
        for kind in bomb.DYNAMIC_KINDS:
            total = metrics.kinds[kind].commits + metrics.kinds[kind].aborts
            assert total >= 1
        for f in range(SMALL.factories):
            count = sum(1 for k in committed(db, PRODUCT)
                        if decode_key(k)[0] == f)
            assert count == SMALL.target_products

    def test_interactive_delay_still_commits(self):
        db = Database()
        data = load(db, SMALL, seed=11)
        eng = make_engine("occ", db)
        metrics = run_bomb(eng, data, "static", duration_s=0.3, seed=3,
                           delay_us=200)
        eng.close()
        assert metrics.kinds["S1"].commits >= 1
