import itertools

import numpy as np
import pytest

from thgraph.metrics import (
    MetricError,
    auc_roc,
    average_precision,
    mean_average_precision,
    ranking_report,
    roc_auc,
)


def oracle_average_precision(scores, labels):
    """Rank-by-rank AP: walk the descending-score order (ties by index),
    read precision at each positive, average."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    hits = 0
    precisions = []
    for rank, idx in enumerate(order, start=1):
        if labels[idx] == 1:
            hits += 1
            precisions.append(hits / rank)
    return sum(precisions) / len(precisions)


def oracle_auc(scores, labels):
    """O(M^2) pairwise comparisons; ties contribute one half."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


class TestAveragePrecision:
    def test_perfect_ranking(self):
        assert average_precision([0.9, 0.8, 0.1], [1, 1, 0]) == 1.0

    def test_spec_example(self):
        got = average_precision([0.9, 0.8, 0.7], [0, 1, 1])
        assert got == pytest.approx((1 / 2 + 2 / 3) / 2, abs=1e-12)
        assert got == pytest.approx(0.583333, abs=1e-6)

    def test_no_positives_rejected(self):
        with pytest.raises(MetricError):
            average_precision([0.5], [0])

    def test_ties_ranked_by_index(self):
        # equal scores: index order decides; positive at index 0 ranks first
        assert average_precision([0.5, 0.5], [1, 0]) == 1.0
        assert average_precision([0.5, 0.5], [0, 1]) == 0.5

    def test_matches_oracle_random(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            m = int(rng.integers(2, 30))
            scores = rng.choice([0.1, 0.25, 0.5, 0.9], size=m)  # discrete -> ties occur
            labels = (rng.random(m) > 0.6).astype(int)
            if labels.sum() == 0:
                labels[int(rng.integers(0, m))] = 1
            got = average_precision(scores, labels)
            assert got == pytest.approx(oracle_average_precision(scores.tolist(), labels.tolist()), abs=1e-12)


class TestAuc:
    def test_perfect_separation(self):
        assert roc_auc([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == 1.0

    def test_all_ties_is_half(self):
        assert roc_auc([0.5, 0.5, 0.5, 0.5], [1, 0, 1, 0]) == 0.5

    def test_single_sided_rejected(self):
        with pytest.raises(MetricError):
            roc_auc([0.5, 0.6], [1, 1])

    def test_matches_pairwise_oracle_random(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            m = int(rng.integers(2, 25))
            scores = rng.choice([0.0, 0.3, 0.6, 1.0], size=m)
            labels = (rng.random(m) > 0.5).astype(int)
            if labels.sum() == 0:
                labels[0] = 1
            if labels.sum() == m:
                labels[-1] = 0
            got = roc_auc(scores, labels)
            assert got == pytest.approx(oracle_auc(scores.tolist(), labels.tolist()), abs=1e-12)


class TestExhaustiveSmall:
    def test_single_class_all_patterns_up_to_m6(self):
        rng = np.random.default_rng(2)
        for m in range(1, 7):
            scores = rng.standard_normal(m)
            tied = rng.choice([0.2, 0.8], size=m)
            for pattern in itertools.product([0, 1], repeat=m):
                if sum(pattern) == 0:
                    continue
                labels = list(pattern)
                for s in (scores, tied):
                    got = average_precision(s, labels)
                    assert got == pytest.approx(oracle_average_precision(s.tolist(), labels), abs=1e-12)
                    if 0 < sum(pattern) < m:
                        assert roc_auc(s, labels) == pytest.approx(
                            oracle_auc(s.tolist(), labels), abs=1e-12
                        )


class TestMacroMetrics:
    def test_perfect_multilabel(self):
        labels = np.array([[1, 0], [0, 1], [1, 1], [0, 0]])
        scores = labels.astype(float)
        assert mean_average_precision(scores, labels) == 1.0
        assert auc_roc(scores, labels) == 1.0

    def test_skipped_classes_reported(self):
        labels = np.array([[1, 0], [0, 0], [1, 0]])  # class 1 has no positives
        scores = np.random.default_rng(3).random((3, 2))
        report = ranking_report(scores, labels)
        assert report.skipped_ap == [1]
        assert 0 in report.ap_per_class and 1 not in report.ap_per_class

    def test_all_positive_class_skipped_for_auc_only(self):
        labels = np.array([[1, 1], [1, 0], [1, 1]])  # class 0 all positive
        scores = np.random.default_rng(4).random((3, 2))
        report = ranking_report(scores, labels)
        assert report.skipped_auc == [0]
        assert report.skipped_ap == []
        assert report.map is not None and report.auc is not None

    def test_macro_average_is_mean_of_per_class(self):
        rng = np.random.default_rng(5)
        scores = rng.random((12, 3))
        labels = (rng.random((12, 3)) > 0.5).astype(int)
        labels[0] = 1
        labels[1] = 0
        report = ranking_report(scores, labels)
        assert report.map == pytest.approx(np.mean(list(report.ap_per_class.values())))
        assert report.auc == pytest.approx(np.mean(list(report.auc_per_class.values())))

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(6)
        scores = rng.standard_normal((15, 2))
        labels = (rng.random((15, 2)) > 0.5).astype(int)
        labels[0] = 1
        labels[1] = 0
        base_map = mean_average_precision(scores, labels)
        base_auc = auc_roc(scores, labels)
        for transform in (lambda x: 2 * x + 1, np.exp, lambda x: 1 / (1 + np.exp(-x))):
            assert mean_average_precision(transform(scores), labels) == pytest.approx(base_map, abs=1e-12)
            assert auc_roc(transform(scores), labels) == pytest.approx(base_auc, abs=1e-12)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(MetricError):
            ranking_report(np.zeros((2, 3)), np.zeros((3, 2)))

    def test_keyvalue_lines_parseable(self):
        labels = np.array([[1, 0], [0, 1], [1, 1], [0, 0]])
        scores = labels + np.random.default_rng(7).random((4, 2)) * 0.1
        report = ranking_report(scores, labels)
        parsed = dict(line.split("=", 1) for line in report.keyvalue_lines())
        assert float(parsed["map"]) == report.map
        assert "ap_class_0" in parsed and "auc_class_1" in parsed
