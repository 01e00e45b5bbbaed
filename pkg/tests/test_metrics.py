"""Classification tallies, open-set ROC, regression and grid reports."""

import json

import numpy as np
import pytest

from envid import metrics
from envid.errors import EmptyPool, LengthMismatch, SingleClassScores
from envid.fewshot import Prototype
from envid.metrics import (ConfusionTally, curve_correlation, open_set_trial,
                           position_accuracy_map, prf1, rmse, roc_auc,
                           top_n_accuracy, volume_bin_classify, volume_bins)


class TestTally:
    def test_prf1_worked_example(self):
        # class a: tp=3 fp=1 fn=3 -> p=0.75 r=0.5 f1=0.6
        preds = ["a", "a", "a", "a", "b", "b", "b", "b", "b", "b"]
        truth = ["a", "a", "a", "b", "a", "a", "a", "b", "b", "b"]
        tally = ConfusionTally.from_pairs(preds, truth)
        row = prf1(tally)["a"]
        assert row["precision"] == pytest.approx(0.75)
        assert row["recall"] == pytest.approx(0.5)
        assert row["f1"] == pytest.approx(0.6)
        assert tally.micro_accuracy() == pytest.approx(0.6)

    def test_zero_over_zero_is_zero(self):
        tally = ConfusionTally.from_pairs(["a", "a"], ["b", "b"])
        row = prf1(tally)["b"]  # never predicted
        assert row["precision"] == 0.0
        assert row["f1"] == 0.0

    def test_top_n(self):
        rankings = [["a", "b", "c"], ["b", "a", "c"], ["c", "b", "a"]]
        truth = ["a", "a", "a"]
        assert top_n_accuracy(rankings, truth, 1) == pytest.approx(1 / 3)
        assert top_n_accuracy(rankings, truth, 2) == pytest.approx(2 / 3)
        assert top_n_accuracy(rankings, truth, 3) == pytest.approx(1.0)
        with pytest.raises(LengthMismatch):
            top_n_accuracy(rankings, ["a"], 1)


class TestRoc:
    def test_auc_equals_rank_statistic(self, rng):
        # trapezoid AUC over the threshold sweep must match the
        # Mann-Whitney probability that unknowns score above knowns
        known = rng.normal(1.0, 0.4, 300)
        unknown = rng.normal(2.0, 0.5, 200)
        scores = [(float(s), True) for s in known] + \
                 [(float(s), False) for s in unknown]
        roc = roc_auc(scores)
        gt = (unknown[:, None] > known[None, :]).mean()
        ties = (unknown[:, None] == known[None, :]).mean()
        assert roc.auc == pytest.approx(gt + 0.5 * ties, abs=1e-12)

    def test_reversed_scores_flip_auc(self, rng):
        known = rng.normal(0.0, 1.0, 50)
        unknown = rng.normal(1.0, 1.0, 50)
        scores = [(float(s), True) for s in known] + \
                 [(float(s), False) for s in unknown]
        flipped = [(-s, k) for s, k in scores]
        assert roc_auc(flipped).auc == pytest.approx(1.0 - roc_auc(scores).auc,
                                                     abs=1e-12)

    def test_endpoints(self, rng):
        scores = [(0.1, True), (0.9, False), (0.4, True)]
        pts = roc_auc(scores).points
        np.testing.assert_allclose(pts[0], [0.0, 0.0])
        np.testing.assert_allclose(pts[-1], [1.0, 1.0])

    def test_single_class_rejected(self):
        with pytest.raises(SingleClassScores):
            roc_auc([(0.5, True), (0.7, True)])


class TestOpenSet:
    def test_exclusion_fraction(self, rng):
        protos = [Prototype(c, rng.standard_normal(4)) for c in "abcd"]
        queries = [(rng.standard_normal(4), "abcd"[i % 4]) for i in range(400)]
        scores = open_set_trial(protos, queries, np.random.default_rng(0))
        known = np.mean([k for _, k in scores])
        assert 0.4 < known < 0.6

    def test_unknown_class_never_known(self, rng):
        protos = [Prototype("a", np.zeros(2)), Prototype("b", np.ones(2))]
        queries = [(rng.standard_normal(2), "zz") for _ in range(10)]
        scores = open_set_trial(protos, queries, np.random.default_rng(0))
        assert all(k is False or k == False for _, k in scores)  # noqa: E712

    def test_exclusion_raises_score(self):
        protos = [Prototype("a", np.zeros(2)),
                  Prototype("b", np.array([10.0, 0.0]))]
        q = [(np.array([0.1, 0.0]), "a")] * 200
        scores = open_set_trial(protos, q, np.random.default_rng(3))
        known_scores = {s for s, k in scores if k}
        unknown_scores = {s for s, k in scores if not k}
        assert max(known_scores) < min(unknown_scores)

    def test_needs_two_classes(self, rng):
        with pytest.raises(EmptyPool):
            open_set_trial([Prototype("a", np.zeros(2))],
                           [(np.zeros(2), "a")], rng)


class TestRegression:
    def test_rmse(self):
        assert rmse(np.array([1.0, 2.0]), np.array([2.0, 4.0])) == \
            pytest.approx(np.sqrt((1 + 4) / 2))

    def test_volume_bins_brute_force(self, rng):
        vals = rng.uniform(0.0, 120.0, 200)  # includes out-of-range values
        lo, hi = 10.0, 110.0
        for n in (2, 3, 5, 10):
            got = volume_bins(vals, n, (lo, hi))
            width = (hi - lo) / n
            ref = np.floor((np.clip(vals, lo, hi) - lo) / width).astype(int)
            ref = np.minimum(ref, n - 1)
            np.testing.assert_array_equal(got, ref)

    def test_bin_classify_boundary(self):
        est = np.array([49.0, 51.0])
        tgt = np.array([51.0, 49.0])
        assert volume_bin_classify(est, tgt, 2, (0.0, 100.0)) == 0.0
        assert volume_bin_classify(est, tgt, 1, (0.0, 100.0)) == 1.0


class TestPositionMap:
    def test_stats_and_nan_cells(self):
        results = [((0, 0), True), ((0, 0), True), ((0, 0), False),
                   ((2, 2), True), ((4, 4), False)]
        acc, stats = position_accuracy_map(results, 5, 5)
        assert acc[0, 0] == pytest.approx(2 / 3)
        assert np.isnan(acc[1, 1])
        assert stats["center"] == pytest.approx(1.0)
        assert stats["corner_mean"] == pytest.approx((2 / 3 + 0.0) / 2)
        assert stats["overall"] == pytest.approx(3 / 5)

    def test_curve_correlation(self):
        a = np.sin(np.linspace(0, 4, 300))
        b = -a[::2]  # opposite sign, different sampling
        assert curve_correlation(a, b) == pytest.approx(-1.0, abs=1e-4)
        assert curve_correlation(a, a) == pytest.approx(1.0, abs=1e-12)


class TestReports:
    def test_csv_and_json_writers(self, tmp_path):
        per_class = {"r1": {"precision": 1.0, "recall": 0.5, "f1": 2 / 3}}
        metrics.write_class_report_csv(tmp_path / "c.csv", per_class)
        text = (tmp_path / "c.csv").read_text()
        assert "class,precision,recall,f1" in text
        assert "r1" in text

        grid = np.array([[0.5, np.nan], [1.0, 0.0]])
        metrics.write_grid_report_csv(tmp_path / "g.csv", grid)
        assert len((tmp_path / "g.csv").read_text().strip().splitlines()) == 5

        metrics.write_summary_json(tmp_path / "s.json", {"auc": 0.9})
        assert json.loads((tmp_path / "s.json").read_text()) == {"auc": 0.9}
