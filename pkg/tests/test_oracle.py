import math

import numpy as np
import pytest

from bitnas.cost import CostConfig, cost_weighting
from bitnas.engine.tensor import Tensor
from bitnas.oracle import (
    DesignSpace, OracleEntry, enumerate_space, load_oracle_csv, mean_cross_entropy, oracle_rank,
    percentile_of, rank_entries, write_oracle_csv,
)
from bitnas.pipeline import ChildConfig, stream
from bitnas.supernet import (
    Architecture, BlockSpec, PrecisionCandidate, SuperNetSpec, arch_from_json,
    arch_to_json, build_child,
)
from test_pipeline import tiny_pair, tiny_spec

COST = CostConfig("model-size", 0.1, 0.9, True)


def three_by_three():
    menu = (PrecisionCandidate.quantized(2, 32),
            PrecisionCandidate.quantized(8, 32),
            PrecisionCandidate.full())
    blocks = (BlockSpec("b0", 4, 4, 1, menu),
              BlockSpec("b1", 4, 4, 1, menu),
              BlockSpec("b2", 4, 8, 2, menu))
    return SuperNetSpec((3, 8, 8), 2, 4, blocks)


def two_point_space():
    menu = (PrecisionCandidate.quantized(4, 32), PrecisionCandidate.full())
    spec = SuperNetSpec((3, 8, 8), 2, 4,
                        (BlockSpec("b0", 4, 4, 1, menu),))
    return DesignSpace(spec)


class TestEnumeration:
    def test_27_architectures_lexicographic(self):
        space = DesignSpace(three_by_three())
        archs = enumerate_space(space)
        assert space.size == 27
        assert len(archs) == 27
        assert archs[0].choices == (0, 0, 0)
        assert archs[1].choices == (0, 0, 1)
        assert archs[-1].choices == (2, 2, 2)
        assert len({a.choices for a in archs}) == 27

    def test_single_block_in_candidate_order(self):
        space = two_point_space()
        archs = enumerate_space(space)
        assert [a.choices for a in archs] == [(0,), (1,)]

    def test_all_round_trip_through_json(self):
        spec = three_by_three()
        for arch in enumerate_space(DesignSpace(spec)):
            back = arch_from_json(spec, arch_to_json(spec, arch))
            assert back.choices == arch.choices

    def test_over_limit_reports_size(self):
        space = DesignSpace(three_by_three(), limit=10)
        with pytest.raises(ValueError, match="27"):
            enumerate_space(space)


def entry(choices, ce, cost, loss, enc=None):
    return OracleEntry(Architecture(tuple(choices)), enc or str(choices),
                       ce, cost, loss, accuracy=0.5)


class TestRanking:
    def test_orders_by_loss(self):
        out = rank_entries([entry((0,), 1.0, 10, 3.0),
                            entry((1,), 1.0, 10, 1.0),
                            entry((2,), 1.0, 10, 2.0)])
        assert [e.arch.choices for e in out] == [(1,), (2,), (0,)]
        assert [e.rank for e in out] == [0, 1, 2]

    def test_loss_tie_broken_by_cost(self):
        out = rank_entries([entry((0,), 1.0, 20, 2.0),
                            entry((1,), 1.0, 10, 2.0)])
        assert out[0].arch.choices == (1,)

    def test_full_tie_broken_lexicographically(self):
        out = rank_entries([entry((1, 0), 1.0, 10, 2.0),
                            entry((0, 1), 1.0, 10, 2.0)])
        assert out[0].arch.choices == (0, 1)

    def test_infinite_loss_sorts_last(self):
        out = rank_entries([entry((0,), math.inf, 5, math.inf),
                            entry((1,), 9.9, 50, 99.0)])
        assert out[0].arch.choices == (1,)
        assert out[1].loss == math.inf

    def test_invariant_to_input_order(self):
        entries = [entry((i,), 1.0 + 0.1 * (i % 3), 10 + i, float(i))
                   for i in range(8)]
        a = rank_entries(list(entries))
        rng = np.random.default_rng(0)
        shuffled = [entries[i] for i in rng.permutation(8)]
        b = rank_entries(shuffled)
        assert [e.arch.choices for e in a] == [e.arch.choices for e in b]

    def test_cheaper_wins_at_equal_ce(self):
        # identical CE, one block at 8 bits vs 4 bits
        ce = 0.7
        c4, c8 = 5_000, 9_000
        w4 = float(cost_weighting(Tensor(float(c4)), 0.1, 0.9).data)
        w8 = float(cost_weighting(Tensor(float(c8)), 0.1, 0.9).data)
        out = rank_entries([entry((1,), ce, c8, ce * w8),
                            entry((0,), ce, c4, ce * w4)])
        assert out[0].cost == c4


class TestPercentile:
    def ranking(self, n):
        return rank_entries([entry((i,), 1.0, 10, float(i)) for i in range(n)])

    def test_best_and_worst(self):
        r = self.ranking(5)
        assert percentile_of(Architecture((0,)), r) == 0.0
        assert percentile_of(Architecture((4,)), r) == 1.0

    def test_median_of_27(self):
        r = self.ranking(27)
        assert percentile_of(Architecture((13,)), r) == pytest.approx(13 / 26)

    def test_absent_rejected(self):
        with pytest.raises(ValueError, match="not present"):
            percentile_of(Architecture((99,)), self.ranking(3))

    def test_singleton_space(self):
        assert percentile_of(Architecture((0,)), self.ranking(1)) == 0.0


class TestCrossEntropy:
    def test_matches_direct_computation(self):
        from bitnas.engine import ops
        train, test = tiny_pair(classes=2, train=4, test=4)
        child = build_child(_two_class_spec(), Architecture((0,)), stream(0, 1))
        child.eval()
        whole = ops.softmax_cross_entropy(
            child(Tensor(test.images)), test.labels)
        assert mean_cross_entropy(child, test) == pytest.approx(
            float(whole.data), rel=1e-6)

    def test_batching_consistent(self):
        _, test = tiny_pair(classes=2, train=4, test=6)
        child = build_child(_two_class_spec(), Architecture((1,)), stream(4, 1))
        a = mean_cross_entropy(child, test, batch_size=4)
        b = mean_cross_entropy(child, test, batch_size=100)
        assert a == pytest.approx(b, rel=1e-5)

    def test_empty_rejected(self):
        _, test = tiny_pair(classes=2, train=4, test=4)
        child = build_child(_two_class_spec(), Architecture((0,)), stream(0, 1))
        with pytest.raises(ValueError, match="empty"):
            mean_cross_entropy(child, test.subset([]))


def _two_class_spec():
    menu = (PrecisionCandidate.full(), PrecisionCandidate.quantized(4, 32))
    return SuperNetSpec((3, 8, 8), 2, 4, (BlockSpec("b0", 4, 4, 1, menu),))


class TestOracleRun:
    BUDGET = ChildConfig(epochs=1, batch_size=8, lr=0.05, cutout=0)

    def run(self, seed=0):
        train, test = tiny_pair(classes=2, train=8, test=4)
        return oracle_rank(two_point_space(), train, test, self.BUDGET, COST,
                           seed=seed)

    def test_ranks_cover_space(self):
        entries = self.run()
        assert len(entries) == 2
        assert [e.rank for e in entries] == [0, 1]
        assert {e.encoding for e in entries} == {"w4a32", "full"}
        for e in entries:
            assert math.isfinite(e.ce)
            assert 0.0 <= e.accuracy <= 1.0
            assert e.cost > 0

    def test_deterministic(self):
        a = self.run(seed=3)
        b = self.run(seed=3)
        assert [e.loss for e in a] == [e.loss for e in b]
        assert [e.encoding for e in a] == [e.encoding for e in b]

    def test_csv_round_trip(self, tmp_path):
        entries = self.run()
        path = tmp_path / "oracle_results.csv"
        write_oracle_csv(path, entries)
        rows = load_oracle_csv(path)
        assert [r["encoding"] for r in rows] == [e.encoding for e in entries]
        assert [int(r["rank"]) for r in rows] == [0, 1]
        assert float(rows[0]["loss"]) == entries[0].loss

    def test_diverged_kept_with_infinite_loss(self, tmp_path):
        from bitnas.data import Dataset
        images = np.full((8, 3, 8, 8), np.inf, dtype=np.float32)
        bad = Dataset(images, np.array([0, 1] * 4, dtype=np.int64), 2)
        entries = oracle_rank(two_point_space(), bad, bad, self.BUDGET, COST,
                              seed=0)
        assert len(entries) == 2
        assert all(e.loss == math.inf for e in entries)
        # tie on loss falls back to cost: the 4-bit one first
        assert entries[0].encoding == "w4a32"
        path = tmp_path / "oracle_results.csv"
        write_oracle_csv(path, entries)
        rows = load_oracle_csv(path)
        assert rows[0]["accuracy"] == ""
        assert float(rows[0]["loss"]) == math.inf
