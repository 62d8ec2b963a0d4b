"""Metric primitives and aggregation against loop-based oracles and hand
arithmetic."""

import json
import math

import numpy as np
import pytest

from trajdiff.exceptions import ConfigError
from trajdiff.metrics import (
    EvalReport,
    aggregate,
    nll_from_scores,
    position_hit,
    position_ndcg,
    rank_of,
    report_from_scores,
)


class TestPrimitives:
    def test_rank_and_hit(self):
        ranked = [7, 3, 9, 1]
        assert rank_of(9, ranked) == 3
        assert rank_of(5, ranked) is None
        assert position_hit(9, ranked, 3) == 1
        assert position_hit(9, ranked, 2) == 0

    def test_ndcg_discount(self):
        ranked = [7, 3, 9, 1]
        # target at rank 3: discount 1/log2(4) = 0.5
        assert math.isclose(position_ndcg(9, ranked, 5), 0.5, abs_tol=1e-12)
        assert position_ndcg(9, ranked, 2) == 0.0
        assert math.isclose(position_ndcg(7, ranked, 1), 1.0, abs_tol=1e-12)


class TestPerplexity:
    def test_hand_logits(self):
        scores = np.array([[[2.0, 0.0, 0.0, 0.0]]])
        targets = np.array([[1]])
        nll = nll_from_scores(scores, targets)[0, 0]
        expect = math.log(math.exp(2.0) + 3.0) - 2.0
        assert math.isclose(nll, expect, abs_tol=1e-12)
        report = report_from_scores(scores, targets, topk_values=(1,))
        assert math.isclose(report.ppl, math.exp(expect), rel_tol=1e-12)
        assert math.isclose(report.ln_ppl, expect, abs_tol=1e-12)

    def test_uniform_scores_give_catalogue_size(self):
        scores = np.zeros((3, 2, 7))
        targets = np.array([[1, 2], [3, 4], [5, 6]])
        report = report_from_scores(scores, targets, topk_values=(1,))
        assert math.isclose(report.ppl, 7.0, rel_tol=1e-12)

    def test_stable_for_large_scores(self):
        scores = np.array([[[500.0, -500.0, 0.0]]])
        nll = nll_from_scores(scores, np.array([[1]]))
        assert np.isfinite(nll).all()


class TestAggregate:
    def test_hand_rates(self):
        # 50 trajectories, k = 2: 25 hits at position 1, 16 at position 2
        hits = np.zeros((50, 2))
        hits[:25, 0] = 1
        hits[:16, 1] = 1
        report = aggregate({5: hits}, {5: hits.copy()})
        assert math.isclose(report.mean_hr[5], 0.41, abs_tol=1e-12)
        assert math.isclose(report.seq_hr[5], 0.4, abs_tol=1e-12)  # sqrt(0.16)
        assert report.per_position_hr[5] == (0.5, 0.32)

    def test_zero_rate_zeroes_geometric_mean(self):
        hits = np.zeros((4, 2))
        hits[:, 0] = 1
        report = aggregate({5: hits}, {5: hits.copy()})
        assert report.seq_hr[5] == 0.0
        assert report.mean_hr[5] == 0.5

    def test_seq_match_bounded_by_min_rate(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            n, k = int(rng.integers(1, 30)), int(rng.integers(1, 6))
            hits = (rng.uniform(size=(n, k)) < rng.uniform()).astype(float)
            report = aggregate({3: hits}, {3: hits * 0.5})
            assert report.seq_match[3] <= min(report.per_position_hr[3]) + 1e-12

    def test_am_gm_ordering(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            hits = (rng.uniform(size=(25, 3)) < 0.6).astype(float)
            report = aggregate({5: hits}, {5: hits.copy()})
            assert report.seq_hr[5] <= report.mean_hr[5] + 1e-12
            assert report.seq_ndcg[5] <= report.mean_ndcg[5] + 1e-12

    def test_shape_validation(self):
        with pytest.raises(ConfigError):
            aggregate({5: np.zeros((0, 2))}, {5: np.zeros((0, 2))})
        with pytest.raises(ConfigError):
            aggregate({5: np.zeros((3, 2))}, {4: np.zeros((3, 2))})


class TestReportFromScores:
    def oracle_report(self, scores, targets, topk_values):
        """Per-example loops over primitives, then the same aggregation."""
        n, k, m = scores.shape
        hits = {K: np.zeros((n, k)) for K in topk_values}
        ndcgs = {K: np.zeros((n, k)) for K in topk_values}
        for i in range(n):
            for j in range(k):
                ranked = list(np.argsort(-scores[i, j], kind="stable") + 1)
                for K in topk_values:
                    hits[K][i, j] = position_hit(targets[i, j], ranked, K)
                    ndcgs[K][i, j] = position_ndcg(targets[i, j], ranked, K)
        return aggregate(hits, ndcgs, nll_from_scores(scores, targets))

    def test_matches_oracle_on_random_instances(self):
        rng = np.random.default_rng(2)
        for _ in range(25):
            n = int(rng.integers(1, 12))
            k = int(rng.integers(1, 5))
            m = int(rng.integers(6, 30))
            scores = rng.normal(size=(n, k, m))
            targets = rng.integers(1, m + 1, size=(n, k))
            topk_values = (1, 5)
            got = report_from_scores(scores, targets, topk_values)
            expect = self.oracle_report(scores, targets, topk_values)
            for K in topk_values:
                assert got.per_position_hr[K] == expect.per_position_hr[K]
                assert got.seq_match[K] == expect.seq_match[K]
                np.testing.assert_allclose(
                    got.per_position_ndcg[K], expect.per_position_ndcg[K], rtol=0, atol=1e-12
                )
            assert math.isclose(got.ppl, expect.ppl, rel_tol=1e-12)

    def test_monotone_in_topk(self):
        rng = np.random.default_rng(3)
        scores = rng.normal(size=(20, 3, 15))
        targets = rng.integers(1, 16, size=(20, 3))
        report = report_from_scores(scores, targets, topk_values=(1, 3, 5, 10))
        for a, b in zip(report.topk_values, report.topk_values[1:]):
            assert report.mean_hr[a] <= report.mean_hr[b] + 1e-12
            assert report.seq_match[a] <= report.seq_match[b] + 1e-12

    def test_topk_beyond_catalogue(self):
        with pytest.raises(ConfigError):
            report_from_scores(np.zeros((1, 1, 3)), np.array([[1]]), topk_values=(5,))


class TestSerialization:
    def make_report(self):
        hits = np.array([[1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
        nll = np.full((3, 2), 0.25)
        return aggregate({5: hits, 10: hits}, {5: hits * 0.8, 10: hits * 0.9}, nll)

    def test_dict_round_trip(self):
        report = self.make_report()
        assert EvalReport.from_dict(report.to_dict()) == report

    def test_jsonl_records(self):
        report = self.make_report()
        lines = [json.loads(line) for line in report.to_jsonl().splitlines()]
        assert len(lines) == 3  # one per cutoff plus the perplexity record
        assert lines[0]["topk"] == 5
        assert lines[-1]["ppl"] == report.ppl

    def test_table_mentions_all_cutoffs(self):
        table = self.make_report().format_table()
        assert "SeqMatch" in table and "ppl" in table
