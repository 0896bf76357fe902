from __future__ import annotations

import math

import numpy as np
import pytest
from scipy import stats as scipy_stats

from conftest import random_prediction_set
from icdkit.analysis import (
    chapter_report,
    code_frequency_correlation,
    doc_length_correlation,
    frequency_bins,
    length_bins,
    mcnemar_bonferroni,
    never_predicted_fraction,
    per_document_f1,
    training_size_curve,
)
from icdkit.corpus import CodeSystem, CodeSystemEntry
from icdkit.errors import DataError
from icdkit.metrics import MetricPolicy, MetricReport, PredictionSet
from icdkit.models import ModelConfig, TrainConfig
from icdkit.splits import stratified_split


def make_preds(scores, targets):
    scores = np.asarray(scores, dtype=float)
    return PredictionSet(
        doc_ids=[f"d{i}" for i in range(scores.shape[0])],
        code_universe=[f"c{j}" for j in range(scores.shape[1])],
        scores=scores,
        targets=np.asarray(targets),
    )


def report_with_f1(per_code_f1, counts=None):
    return MetricReport(
        policy=MetricPolicy(),
        values={},
        per_code_f1=dict(per_code_f1),
        per_code_counts=counts or {c: (1, 0, 0, 1) for c in per_code_f1},
        missing_codes=[],
        n_missing_codes=0,
    )


class TestCodeFrequencyCorrelation:
    def test_exact_linear_relation(self):
        counts = {f"c{i}": 2**i for i in range(1, 8)}
        f1 = {code: 0.05 * math.log(count) + 0.1 for code, count in counts.items()}
        result = code_frequency_correlation(report_with_f1(f1), counts)
        assert result.pearson == pytest.approx(1.0, abs=1e-12)
        assert result.spearman == pytest.approx(1.0, abs=1e-12)
        assert result.p_value_pearson == 0.0

    def test_constant_f1_flagged(self):
        counts = {f"c{i}": i + 1 for i in range(5)}
        result = code_frequency_correlation(report_with_f1({c: 0.4 for c in counts}), counts)
        assert result.pearson == 0.0
        assert result.zero_variance

    def test_absent_codes_excluded(self):
        counts = {"c0": 5, "c1": 9, "c2": 13}
        f1 = {"c0": 0.1, "c1": 0.5, "c2": 0.7, "ghost": 0.9}
        result = code_frequency_correlation(report_with_f1(f1), counts)
        assert result.n == 3
        assert result.n_excluded == 1

    def test_fewer_than_three_errors(self):
        with pytest.raises(DataError):
            code_frequency_correlation(report_with_f1({"a": 0.1, "b": 0.2}), {"a": 1, "b": 2})

    def test_spearman_invariant_under_monotone_transform(self):
        rng = np.random.default_rng(42)
        counts = {f"c{i}": int(rng.integers(1, 500)) for i in range(30)}
        f1 = {c: float(rng.random()) for c in counts}
        base = code_frequency_correlation(report_with_f1(f1), counts)
        # cubing the counts is a strictly monotone transform of x
        cubed = {c: v**3 for c, v in counts.items()}
        transformed = code_frequency_correlation(report_with_f1(f1), cubed)
        assert transformed.spearman == pytest.approx(base.spearman, abs=1e-12)

    def test_matches_scipy_reference(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            n = int(rng.integers(5, 100))
            counts = {f"c{i}": int(rng.integers(1, 1000)) for i in range(n)}
            f1 = {c: float(rng.random()) for c in counts}
            result = code_frequency_correlation(report_with_f1(f1), counts)
            xs = np.array([math.log(counts[c]) for c in counts])
            ys = np.array([f1[c] for c in counts])
            want_r, want_p = scipy_stats.pearsonr(xs, ys)
            want_rho, want_rho_p = scipy_stats.spearmanr(xs, ys)
            assert result.pearson == pytest.approx(want_r, abs=1e-9)
            assert result.p_value_pearson == pytest.approx(want_p, abs=1e-9)
            assert result.spearman == pytest.approx(want_rho, abs=1e-9)
            assert result.p_value_spearman == pytest.approx(want_rho_p, abs=1e-9)


class TestDocLengthCorrelation:
    def test_band_excludes_short_docs(self):
        rng = np.random.default_rng(1)
        preds = make_preds(rng.random((6, 4)), (rng.random((6, 4)) < 0.5).astype(int))
        counts = {"d0": 500, "d1": 1200, "d2": 1500, "d3": 2000, "d4": 3999, "d5": 4500}
        result = doc_length_correlation(preds, 0.5, counts)
        assert result.n + result.n_excluded == 6
        assert result.n <= 4  # d0 and d5 are outside the band for sure

    def test_planted_negative_gradient_recovered(self):
        # longer documents get systematically worse predictions
        rng = np.random.default_rng(2)
        n_docs, n_codes = 60, 8
        targets = (rng.random((n_docs, n_codes)) < 0.4).astype(int)
        targets[:, 0] = 1
        lengths = np.linspace(1000, 4000, n_docs).astype(int)
        scores = np.zeros((n_docs, n_codes))
        for i in range(n_docs):
            noise = (lengths[i] - 1000) / 3000  # 0 .. 1
            flip = rng.random(n_codes) < noise * 0.5
            scores[i] = np.where(targets[i] == 1, 0.9, 0.1)
            scores[i][flip] = 1.0 - scores[i][flip]
        preds = make_preds(scores, targets)
        counts = {f"d{i}": int(lengths[i]) for i in range(n_docs)}
        result = doc_length_correlation(preds, 0.5, counts)
        assert result.pearson < -0.3
        assert result.spearman < -0.3

    def test_all_perfect_is_flagged(self):
        targets = np.ones((5, 3), dtype=int)
        preds = make_preds(np.full((5, 3), 0.9), targets)
        counts = {f"d{i}": 2000 for i in range(5)}
        result = doc_length_correlation(preds, 0.5, counts)
        assert result.zero_variance

    def test_too_few_in_band(self):
        preds = make_preds(np.full((3, 2), 0.9), np.ones((3, 2), dtype=int))
        counts = {"d0": 100, "d1": 200, "d2": 1500}
        with pytest.raises(DataError):
            doc_length_correlation(preds, 0.5, counts)

    def test_per_document_f1_skips_undefined(self):
        preds = make_preds([[0.1, 0.1], [0.9, 0.1]], [[0, 0], [1, 0]])
        f1, defined = per_document_f1(preds, 0.5)
        assert not defined[0] and defined[1]
        assert f1[1] == 1.0


class TestNeverPredicted:
    def test_perfect_predictions(self):
        targets = np.array([[1, 0], [0, 1]])
        preds = make_preds(np.where(targets == 1, 0.9, 0.1), targets)
        result = never_predicted_fraction(preds, 0.5)
        assert result.fraction == 0.0 and result.codes == []

    def test_all_negative_predictions(self):
        targets = np.array([[1, 0], [0, 1]])
        preds = make_preds(np.full((2, 2), 0.1), targets)
        result = never_predicted_fraction(preds, 0.5)
        assert result.fraction == 1.0
        assert result.codes == ["c0", "c1"]

    def test_matches_column_scan(self):
        rng = np.random.default_rng(3)
        preds = random_prediction_set(rng, 50, 15)
        result = never_predicted_fraction(preds, 0.5)
        never, eligible = [], 0
        for j, code in enumerate(preds.code_universe):
            positives = preds.targets[:, j] == 1
            if positives.any():
                eligible += 1
                if not (preds.scores[positives, j] > 0.5).any():
                    never.append(code)
        assert result.codes == never
        assert result.n_eligible == eligible


def tiny_code_system():
    entries = {}
    for code, chapter, kind in [
        ("A01", "I", "diagnosis"),
        ("A02", "I", "diagnosis"),
        ("Z68", "XXI", "diagnosis"),
        ("Z69", "XXI", "diagnosis"),
        ("P01", "PRC", "procedure"),
    ]:
        entries[code] = CodeSystemEntry(
            code=code, description=code, chapter_id=chapter, chapter_label=f"Chapter {chapter}",
            category=code[:2], kind=kind, version="ICD-10",
        )
    return CodeSystem(entries=entries)


class TestChapterReport:
    def counts_and_report(self):
        per_code_f1 = {"A01": 0.8, "A02": 0.6, "Z68": 0.2, "Z69": 0.0, "P01": 0.9}
        per_code_counts = {
            "A01": (8, 2, 2, 10), "A02": (3, 1, 3, 10), "Z68": (1, 4, 4, 10),
            "Z69": (0, 0, 5, 10), "P01": (9, 1, 1, 10),
        }
        train_counts = {"A01": 500, "A02": 300, "Z68": 150, "Z69": 40, "P01": 900}
        return report_with_f1(per_code_f1, per_code_counts), train_counts

    def test_grouping_and_filtering(self):
        report, train_counts = self.counts_and_report()
        result = chapter_report(report, tiny_code_system(), train_counts, min_occurrences=100)
        # P01 is a procedure, Z69 is under the floor
        assert set(result.chapters) == {"I", "XXI"}
        ch1 = result.chapters["I"]
        assert ch1["n_codes"] == 2 and ch1["n_examples"] == 800
        assert ch1["f1_macro"] == pytest.approx(0.7)
        tp, fp, fn = 8 + 3, 2 + 1, 2 + 3
        assert ch1["f1_micro"] == pytest.approx(2 * tp / (2 * tp + fp + fn))
        assert result.chapters["XXI"]["n_codes"] == 1

    def test_floor_above_everything_empties_report(self):
        report, train_counts = self.counts_and_report()
        result = chapter_report(report, tiny_code_system(), train_counts, min_occurrences=10_000)
        assert result.chapters == {}

    def test_single_chapter_macro_equals_global(self):
        report, train_counts = self.counts_and_report()
        only_a = report_with_f1(
            {c: report.per_code_f1[c] for c in ("A01", "A02")},
            {c: report.per_code_counts[c] for c in ("A01", "A02")},
        )
        result = chapter_report(only_a, tiny_code_system(), train_counts, min_occurrences=100)
        global_macro = np.mean([only_a.per_code_f1[c] for c in ("A01", "A02")])
        assert result.chapters["I"]["f1_macro"] == pytest.approx(global_macro)

    def test_unknown_code_errors(self):
        report = report_with_f1({"MYSTERY": 0.5})
        with pytest.raises(DataError, match="MYSTERY"):
            chapter_report(report, tiny_code_system(), {"MYSTERY": 200})

    def test_chapter_code_counts_sum(self):
        report, train_counts = self.counts_and_report()
        result = chapter_report(report, tiny_code_system(), train_counts, min_occurrences=100)
        assert sum(ch["n_codes"] for ch in result.chapters.values()) == result.n_codes_included


class TestMcNemar:
    def test_identical_predictions_p_one(self):
        rng = np.random.default_rng(4)
        preds = random_prediction_set(rng, 30, 8)
        result = mcnemar_bonferroni(preds, preds, 0.5)
        assert result.b == 0 and result.c == 0
        assert result.raw_p == 1.0
        assert not result.significant

    def test_exact_binomial_b0_c20(self):
        # 20 cells where only B is correct, all others tied
        targets = np.zeros((20, 2), dtype=int)
        targets[:, 0] = 1
        scores_a = np.full((20, 2), 0.1)  # misses code 0 everywhere
        scores_b = scores_a.copy()
        scores_b[:, 0] = 0.9  # B gets code 0 right
        a = make_preds(scores_a, targets)
        b = make_preds(scores_b, targets)
        result = mcnemar_bonferroni(a, b, 0.5)
        assert result.method == "exact"
        assert (result.b, result.c) == (0, 20)
        assert result.raw_p == pytest.approx(2 * 0.5**20, rel=1e-12)
        assert result.raw_p == pytest.approx(1.9073486328125e-06, rel=1e-9)

    def test_symmetry(self):
        rng = np.random.default_rng(5)
        preds_a = random_prediction_set(rng, 40, 10)
        preds_b = PredictionSet(
            doc_ids=list(preds_a.doc_ids),
            code_universe=list(preds_a.code_universe),
            scores=rng.random(preds_a.scores.shape),
            targets=preds_a.targets.copy(),
        )
        ab = mcnemar_bonferroni(preds_a, preds_b, 0.5)
        ba = mcnemar_bonferroni(preds_b, preds_a, 0.5)
        assert ab.raw_p == ba.raw_p
        assert (ab.b, ab.c) == (ba.c, ba.b)

    def test_bonferroni_and_significance(self):
        targets = np.zeros((30, 2), dtype=int)
        targets[:, 0] = 1
        scores_a = np.full((30, 2), 0.1)
        scores_b = scores_a.copy()
        scores_b[:, 0] = 0.9
        result = mcnemar_bonferroni(make_preds(scores_a, targets), make_preds(scores_b, targets), 0.5, n_comparisons=15)
        assert result.method == "chi2"
        assert result.corrected_p == pytest.approx(min(1.0, result.raw_p * 15), rel=1e-12)

    def test_matches_reference_contingency_oracle(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            preds_a = random_prediction_set(rng, 30, 6)
            preds_b = PredictionSet(
                doc_ids=list(preds_a.doc_ids),
                code_universe=list(preds_a.code_universe),
                scores=rng.random(preds_a.scores.shape),
                targets=preds_a.targets.copy(),
            )
            result = mcnemar_bonferroni(preds_a, preds_b, 0.5)
            b = c = 0
            for i in range(preds_a.n_docs):
                for j in range(preds_a.n_codes):
                    ok_a = (preds_a.scores[i, j] > 0.5) == (preds_a.targets[i, j] == 1)
                    ok_b = (preds_b.scores[i, j] > 0.5) == (preds_b.targets[i, j] == 1)
                    b += ok_a and not ok_b
                    c += ok_b and not ok_a
            assert (result.b, result.c) == (b, c)
            if b + c < 25:
                want = float(min(1.0, 2 * scipy_stats.binom.cdf(min(b, c), b + c, 0.5))) if b + c else 1.0
                assert result.raw_p == pytest.approx(want, abs=1e-9)
            else:
                stat = (abs(b - c) - 1) ** 2 / (b + c)
                assert result.raw_p == pytest.approx(float(scipy_stats.chi2.sf(stat, df=1)), abs=1e-9)

    def test_shape_mismatch_errors(self):
        rng = np.random.default_rng(7)
        a = random_prediction_set(rng, 10, 4)
        b = random_prediction_set(rng, 10, 5)
        with pytest.raises(DataError):
            mcnemar_bonferroni(a, b, 0.5)

    def test_document_unit_mode(self):
        targets = np.array([[1, 0], [0, 1], [1, 1]])
        perfect = np.where(targets == 1, 0.9, 0.1)
        one_wrong = perfect.copy()
        one_wrong[0, 1] = 0.9  # spoils doc 0 for model B
        result = mcnemar_bonferroni(make_preds(perfect, targets), make_preds(one_wrong, targets), 0.5, unit="documents")
        assert (result.b, result.c) == (1, 0)


class TestPlotBins:
    def test_frequency_bins_cover_all_codes(self):
        rng = np.random.default_rng(8)
        f1 = {f"c{i}": float(rng.random()) for i in range(40)}
        counts = {c: int(rng.integers(1, 500)) for c in f1}
        bins = frequency_bins(report_with_f1(f1), counts, n_bins=6)
        assert sum(b["n_codes"] for b in bins) == 40
        for b in bins:
            assert 0.0 <= b["mean_f1"] <= 1.0 and b["std_f1"] >= 0.0

    def test_length_bins_histogram(self):
        rng = np.random.default_rng(9)
        preds = make_preds(rng.random((20, 3)), (rng.random((20, 3)) < 0.6).astype(int))
        counts = {f"d{i}": int(rng.integers(100, 3000)) for i in range(20)}
        bins = length_bins(preds, 0.5, counts, bin_width=1000)
        f1, defined = per_document_f1(preds, 0.5)
        assert sum(b["n_docs"] for b in bins) == int(defined.sum())


class TestTrainingSizeCurve:
    def test_curve_runs_and_largest_size_matches_direct_run(self, trigger_corpus):
        split = stratified_split(trigger_corpus, seed=5)
        n_train = sum(1 for s in split.assignment.values() if s == "train")
        model = ModelConfig(encoder="conv", decoder="la_caml", d_e=16, d_h=32, window=3)
        training = TrainConfig(lr=0.005, weight_decay=1e-4, dropout=0.2, batch_size=8,
                               epochs=4, warmup_updates=10, seed=2, max_words=4000)
        sizes = [n_train // 2, n_train]
        curve = training_size_curve(trigger_corpus, split, sizes, model, training)
        assert [p["size"] for p in curve] == sizes
        for point in curve:
            assert 0.0 <= point["micro_f1"] <= 1.0

        # the full-size point equals a direct train run with the same seed
        from icdkit.models import train as train_fn
        from icdkit.tuning import tune as tune_fn
        from icdkit.metrics import confusion_counts, f1_micro

        direct_cfg = TrainConfig(lr=0.005, weight_decay=1e-4, dropout=0.2, batch_size=8,
                                 epochs=4, warmup_updates=10, seed=2 + 1, max_words=4000)
        direct = train_fn(trigger_corpus, split, model, direct_cfg)
        boundary = tune_fn(direct.val).best_boundary
        assert curve[-1]["micro_f1"] == pytest.approx(
            f1_micro(confusion_counts(direct.test, boundary)), abs=1e-12
        )

    def test_micro_f1_non_decreasing_in_size(self, trigger_corpus):
        # allows a single inversion of at most 0.02 (tolerance from the pilot run)
        split = stratified_split(trigger_corpus, seed=5)
        n_train = sum(1 for s in split.assignment.values() if s == "train")
        sizes = [n_train // 4, n_train // 2, n_train]
        model = ModelConfig(encoder="conv", decoder="la_caml", d_e=16, d_h=32, window=3)
        for seed in (1, 2, 3):
            training = TrainConfig(lr=0.005, weight_decay=1e-4, dropout=0.2, batch_size=8,
                                   epochs=8, warmup_updates=20, seed=seed, max_words=4000)
            values = [p["micro_f1"] for p in training_size_curve(trigger_corpus, split, sizes, model, training)]
            inversions = [values[i] - values[i + 1] for i in range(len(values) - 1) if values[i + 1] < values[i]]
            assert len(inversions) <= 1
            assert all(gap <= 0.02 for gap in inversions)

    def test_sizes_must_ascend(self, trigger_corpus):
        split = stratified_split(trigger_corpus, seed=5)
        model = ModelConfig()
        training = TrainConfig(seed=0)
        with pytest.raises(DataError):
            training_size_curve(trigger_corpus, split, [50, 20], model, training)
