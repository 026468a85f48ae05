"""Key-value workload tests.

The key distribution is checked with an independent chi-square goodness-of-
fit oracle and against the exact Zipfian mass function; the op mix and the
abort-freedom of uncontended runs are checked directly.
"""
import random

import pytest

from mvsgtx.engine import make_engine
from mvsgtx.oracle import History, check_mvsr
from mvsgtx.storage import Database, encode_key
from mvsgtx.ycsb import (
    USERTABLE, YcsbConfig, ZipfianGenerator, draw_ops, load_ycsb,
    make_ycsb_txn, next_key, run_ycsb_a,
)

# 0.1% upper critical value of the chi-square distribution, 99 degrees of
# freedom (one less than the 100 key bins used below).
CHI2_CRIT_99_DF_P001 = 148.230


def chi_square(observed, expected):
    """Independent goodness-of-fit statistic: sum((obs-exp)^2 / exp)."""
    return sum((o - e) ** 2 / e for o, e in zip(observed, expected))


class TestConfig:
    def test_defaults(self):
        c = YcsbConfig()
        assert (c.record_count, c.payload_bytes, c.ops_per_txn,
                c.theta, c.read_fraction) == (100_000, 100, 16, 0.0, 0.5)

    def test_validation(self):
        with pytest.raises(ValueError, match="record_count"):
            YcsbConfig(record_count=0)
        with pytest.raises(ValueError, match="ops_per_txn"):
            YcsbConfig(ops_per_txn=0)
        with pytest.raises(ValueError, match="theta"):
            YcsbConfig(theta=1.0)
        with pytest.raises(ValueError, match="read_fraction"):
            YcsbConfig(read_fraction=1.5)


class TestKeyDistribution:
    def test_uniform_draws_fit_chi_square(self):
        # theta=0 over 100 keys: a million draws must fit the uniform
        # distribution per the chi-square test and stay within 3 sigma
        # per key (frozen seed keeps the check deterministic).
        config = YcsbConfig(record_count=100, theta=0.0)
        rng = random.Random(424242)
        n_draws = 1_000_000
        counts = [0] * 100
        for _ in range(n_draws):
            counts[next_key(rng, config)] += 1
        expected = n_draws / 100
        assert chi_square(counts, [expected] * 100) < CHI2_CRIT_99_DF_P001
        sigma = (n_draws * 0.01 * 0.99) ** 0.5
        assert all(abs(c - expected) <= 3 * sigma for c in counts)

    def test_skewed_draws_match_exact_mass(self):
        # the approximation must land close to the closed-form Zipfian
        # probabilities, and rank order must be monotone in popularity
        gen = ZipfianGenerator(100, 0.99)
        rng = random.Random(7)
        n_draws = 200_000
        counts = [0] * 100
        for _ in range(n_draws):
            counts[gen.next(rng)] += 1
        freq = [c / n_draws for c in counts]
        for rank in (0, 1, 2, 10, 50):
            assert freq[rank] == pytest.approx(gen.probability(rank),
                                               abs=0.02)
        assert freq[0] > freq[9] > freq[49]

    def test_skewed_top_key_exceeds_uniform(self):
        config = YcsbConfig(record_count=100, theta=0.99)
        rng = random.Random(3)
        counts = [0] * 100
        for _ in range(20_000):
            counts[next_key(rng, config)] += 1
        assert counts[0] > 10 * (20_000 / 100)

    def test_fixed_seed_reproduces_key_stream(self):
        config = YcsbConfig(record_count=1000, theta=0.7)
        rng1, rng2 = random.Random(99), random.Random(99)
        s1 = [next_key(rng1, config) for _ in range(200)]
        s2 = [next_key(rng2, config) for _ in range(200)]
        assert s1 == s2

    def test_draws_stay_in_range(self):
        for theta in (0.0, 0.5, 0.99):
            config = YcsbConfig(record_count=3, theta=theta)
            rng = random.Random(11)
            assert all(0 <= next_key(rng, config) < 3 for _ in range(2000))
        single = YcsbConfig(record_count=1, theta=0.9)
        rng = random.Random(1)
        assert all(next_key(rng, single) == 0 for _ in range(100))


class TestOpMix:
    def test_read_fraction_within_one_percent(self):
        config = YcsbConfig(record_count=1000, ops_per_txn=16)
        rng = random.Random(5)
        reads = total = 0
        while total < 100_000:
            for is_read, _key, payload in draw_ops(config, rng):
                reads += is_read
                total += 1
                assert (payload is None) == is_read
        assert abs(reads / total - 0.5) < 0.01

    def test_write_payload_sizes(self):
        config = YcsbConfig(record_count=10, payload_bytes=24,
                            read_fraction=0.0, ops_per_txn=8)
        ops = draw_ops(config, random.Random(2))
        assert all(not r and len(p) == 24 for r, _k, p in ops)


class TestRun:
    def test_load_populates_table(self):
        db = Database()
        config = YcsbConfig(record_count=500, payload_bytes=32)
        load_ycsb(db, config, seed=1)
        rows = db.dump_committed()[USERTABLE]
        assert len(rows) == 500
        assert all(len(v) == 32 for v in rows.values())
        assert encode_key(0) in rows and encode_key(499) in rows

    def test_single_thread_uniform_never_aborts(self):
        db = Database()
        config = YcsbConfig(record_count=200, payload_bytes=16,
                            ops_per_txn=8)
        load_ycsb(db, config, seed=1)
        eng = make_engine("oze-central", db)
        metrics = run_ycsb_a(config, eng, threads=1, duration_s=0.3, seed=9)
        eng.close()
        assert metrics.commits > 0
        assert metrics.aborts == 0
        assert metrics.abort_rate == 0.0
        assert metrics.throughput_tps > 0

    def test_contended_run_history_is_serializable(self):
        db = Database()
        config = YcsbConfig(record_count=64, payload_bytes=16,
                            ops_per_txn=4, theta=0.9)
        load_ycsb(db, config, seed=1)
        eng = make_engine("oze-decentral", db)
        eng.history = History()
        metrics = run_ycsb_a(config, eng, threads=3, duration_s=0.3, seed=9)
        verdict = check_mvsr(eng.history)
        eng.close()
        assert metrics.commits > 0
        assert verdict.serializable, verdict.cycle

    def test_cycle_check_delta_is_windowed(self):
        db = Database()
        config = YcsbConfig(record_count=64, payload_bytes=16, ops_per_txn=4)
        load_ycsb(db, config, seed=1)
        eng = make_engine("oze-central", db)
        first = run_ycsb_a(config, eng, threads=2, duration_s=0.2, seed=1)
        second = run_ycsb_a(config, eng, threads=2, duration_s=0.2, seed=2)
        eng.close()
        assert first.cycle_checks > 0
        assert second.cycle_checks > 0
        total = eng.stats.snapshot()["cycle_checks"]
        assert first.cycle_checks + second.cycle_checks == total

    def test_rejects_nonpositive_threads(self):
        db = Database()
        config = YcsbConfig(record_count=10)
        load_ycsb(db, config, seed=1)
        eng = make_engine("occ", db)
        with pytest.raises(ValueError, match="threads"):
            run_ycsb_a(config, eng, threads=0, duration_s=0.1, seed=1)
        eng.close()
