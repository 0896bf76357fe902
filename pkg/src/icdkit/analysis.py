"""Error-analysis battery: frequency/length correlations, never-predicted
audits, chapter-level aggregation, paired significance tests, and
training-size curves."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np
from scipy import stats as scipy_stats

from icdkit.corpus import CodeSystem, Corpus
from icdkit.errors import DataError
from icdkit.metrics import (
    MetricPolicy,
    MetricReport,
    PredictionSet,
    confusion_counts,
    f1_macro,
    f1_micro,
    midranks,
)
from icdkit.models.config import ModelConfig, TrainConfig
from icdkit.models.training import train
from icdkit.splits import SplitAssignment, stratified_subset
from icdkit.tuning import tune

__all__ = [
    "ChapterReport",
    "CorrelationResult",
    "McNemarResult",
    "NeverPredictedResult",
    "chapter_report",
    "code_frequency_correlation",
    "doc_length_correlation",
    "mcnemar_bonferroni",
    "never_predicted_fraction",
    "training_size_curve",
]


@dataclass(frozen=True)
class CorrelationResult:
    pearson: float
    spearman: float
    n: int
    p_value_pearson: float
    p_value_spearman: float
    n_excluded: int = 0
    zero_variance: bool = False

    def to_json_dict(self) -> dict:
        return {
            "pearson": self.pearson,
            "spearman": self.spearman,
            "n": self.n,
            "p_value_pearson": self.p_value_pearson,
            "p_value_spearman": self.p_value_spearman,
            "n_excluded": self.n_excluded,
            "zero_variance": self.zero_variance,
        }


def _pearson(x: np.ndarray, y: np.ndarray) -> tuple[float, float, bool]:
    """Pearson r and its two-sided t-approximation p-value.

    Zero variance in either variable yields r = 0 by convention, flagged.
    """
    n = len(x)
    xc = x - x.mean()
    yc = y - y.mean()
    sx = float(np.sqrt((xc * xc).sum()))
    sy = float(np.sqrt((yc * yc).sum()))
    if sx == 0.0 or sy == 0.0:
        return 0.0, 1.0, True
    r = float((xc * yc).sum() / (sx * sy))
    r = max(-1.0, min(1.0, r))
    if abs(r) == 1.0:
        return r, 0.0, False
    t = r * math.sqrt((n - 2) / (1.0 - r * r))
    p = 2.0 * float(scipy_stats.t.sf(abs(t), df=n - 2))
    return r, p, False


def _correlations(x: np.ndarray, y: np.ndarray, n_excluded: int) -> CorrelationResult:
    if len(x) < 3:
        raise DataError(f"need at least 3 points for correlations, got {len(x)}")
    pearson, p_pearson, flat = _pearson(x, y)
    spearman, p_spearman, flat_rank = _pearson(midranks(x), midranks(y))
    return CorrelationResult(
        pearson=pearson,
        spearman=spearman,
        n=len(x),
        p_value_pearson=p_pearson,
        p_value_spearman=p_spearman,
        n_excluded=n_excluded,
        zero_variance=flat or flat_rank,
    )


def code_frequency_correlation(report: MetricReport, train_counts: Mapping[str, int]) -> CorrelationResult:
    """Correlate per-code F1 with the natural log of training frequency.

    Codes absent from the training counts (or with count < 1) are excluded;
    the exclusion count is reported.
    """
    xs: list[float] = []
    ys: list[float] = []
    excluded = 0
    for code, f1 in report.per_code_f1.items():
        count = train_counts.get(code, 0)
        if count < 1:
            excluded += 1
            continue
        xs.append(math.log(count))
        ys.append(f1)
    return _correlations(np.asarray(xs), np.asarray(ys), excluded)


def per_document_f1(preds: PredictionSet, boundary: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-document micro F1; second array marks documents where it is defined."""
    predicted = preds.scores > boundary
    actual = preds.targets.astype(bool)
    tp = (predicted & actual).sum(axis=1)
    fp = (predicted & ~actual).sum(axis=1)
    fn = (~predicted & actual).sum(axis=1)
    denom = 2.0 * tp + fp + fn
    defined = denom > 0
    f1 = np.zeros(preds.n_docs)
    f1[defined] = 2.0 * tp[defined] / denom[defined]
    return f1, defined


def doc_length_correlation(
    preds: PredictionSet,
    boundary: float,
    word_counts: Mapping[str, int],
    min_words: int = 1000,
    max_words: int = 4000,
) -> CorrelationResult:
    """Correlate per-document micro F1 with word count inside [min_words, max_words].

    Documents outside the band, missing a word count, or with an undefined
    per-document F1 (no positives and no predictions) are excluded.
    """
    f1, defined = per_document_f1(preds, boundary)
    xs: list[float] = []
    ys: list[float] = []
    excluded = 0
    for i, doc_id in enumerate(preds.doc_ids):
        count = word_counts.get(doc_id)
        if count is None or not (min_words <= count <= max_words) or not defined[i]:
            excluded += 1
            continue
        xs.append(float(count))
        ys.append(float(f1[i]))
    if len(xs) < 3:
        raise DataError(f"fewer than 3 documents in the [{min_words}, {max_words}] word band")
    return _correlations(np.asarray(xs), np.asarray(ys), excluded)


@dataclass(frozen=True)
class NeverPredictedResult:
    fraction: float
    codes: list[str]
    n_eligible: int

    def to_json_dict(self) -> dict:
        return {"fraction": self.fraction, "codes": self.codes, "n_eligible": self.n_eligible}


def never_predicted_fraction(preds: PredictionSet, boundary: float) -> NeverPredictedResult:
    """Among codes with at least one positive target, the fraction never
    predicted correctly (zero true positives at the boundary)."""
    counts = confusion_counts(preds, boundary)
    eligible = (counts.tp + counts.fn) > 0
    never = eligible & (counts.tp == 0)
    n_eligible = int(eligible.sum())
    codes = [code for j, code in enumerate(preds.code_universe) if never[j]]
    fraction = len(codes) / n_eligible if n_eligible else 0.0
    return NeverPredictedResult(fraction=fraction, codes=codes, n_eligible=n_eligible)


@dataclass
class ChapterReport:
    """Per-chapter scores over diagnosis codes above a training-count floor."""

    chapters: dict[str, dict]
    min_occurrences: int
    n_codes_included: int

    def to_json_dict(self) -> dict:
        return {
            "chapters": self.chapters,
            "min_occurrences": self.min_occurrences,
            "n_codes_included": self.n_codes_included,
        }


def chapter_report(
    report: MetricReport,
    code_system: CodeSystem,
    train_counts: Mapping[str, int],
    min_occurrences: int = 100,
) -> ChapterReport:
    """Group per-code results by chapter: arithmetic macro F1 plus pooled micro F1.

    Only diagnosis codes with strictly more than ``min_occurrences`` training
    examples participate; chapters left with no surviving codes are omitted.
    """
    by_chapter: dict[str, list[str]] = {}
    for code in report.per_code_f1:
        if code not in code_system:
            raise DataError(f"code {code!r} not present in the code system")
        entry = code_system.entries[code]
        if entry.kind != "diagnosis":
            continue
        if train_counts.get(code, 0) <= min_occurrences:
            continue
        by_chapter.setdefault(entry.chapter_id, []).append(code)

    chapters: dict[str, dict] = {}
    total = 0
    for chapter_id in sorted(by_chapter):
        codes = sorted(by_chapter[chapter_id])
        total += len(codes)
        tp = sum(report.per_code_counts[c][0] for c in codes)
        fp = sum(report.per_code_counts[c][1] for c in codes)
        fn = sum(report.per_code_counts[c][2] for c in codes)
        micro_denom = 2 * tp + fp + fn
        chapters[chapter_id] = {
            "chapter_label": code_system.entries[codes[0]].chapter_label,
            "n_codes": len(codes),
            "n_examples": int(sum(train_counts[c] for c in codes)),
            "f1_macro": float(np.mean([report.per_code_f1[c] for c in codes])),
            "f1_micro": (2.0 * tp / micro_denom) if micro_denom else 0.0,
        }
    return ChapterReport(chapters=chapters, min_occurrences=min_occurrences, n_codes_included=total)


@dataclass(frozen=True)
class McNemarResult:
    statistic: float
    raw_p: float
    corrected_p: float
    significant: bool
    b: int  # A correct, B wrong
    c: int  # A wrong, B correct
    method: str  # "exact" | "chi2"

    def to_json_dict(self) -> dict:
        return {
            "statistic": self.statistic,
            "raw_p": self.raw_p,
            "corrected_p": self.corrected_p,
            "significant": self.significant,
            "b": self.b,
            "c": self.c,
            "method": self.method,
        }


def _exact_binomial_p(b: int, c: int) -> float:
    n = b + c
    if n == 0:
        return 1.0
    k = min(b, c)
    tail = sum(math.comb(n, i) for i in range(k + 1)) / 2.0**n
    return min(1.0, 2.0 * tail)


def mcnemar_bonferroni(
    preds_a: PredictionSet,
    preds_b: PredictionSet,
    boundary: float,
    n_comparisons: int = 1,
    alpha: float = 0.001,
    unit: str = "cells",
) -> McNemarResult:
    """McNemar's test between two aligned prediction sets, Bonferroni-corrected.

    With ``unit="cells"`` the paired outcomes are all (document, code) cells;
    ``unit="documents"`` instead pairs per-document exact-match outcomes.
    The exact binomial test is used when b + c < 25, otherwise chi-squared
    with continuity correction.
    """
    if preds_a.doc_ids != preds_b.doc_ids or preds_a.code_universe != preds_b.code_universe:
        raise DataError("prediction sets are not aligned (documents or codes differ)")
    if not np.array_equal(preds_a.targets, preds_b.targets):
        raise DataError("prediction sets disagree on the targets")
    if unit not in ("cells", "documents"):
        raise DataError(f"unit must be 'cells' or 'documents', got {unit!r}")
    if n_comparisons < 1:
        raise DataError("n_comparisons must be >= 1")

    correct_a = (preds_a.scores > boundary) == preds_a.targets.astype(bool)
    correct_b = (preds_b.scores > boundary) == preds_b.targets.astype(bool)
    if unit == "documents":
        correct_a = correct_a.all(axis=1)
        correct_b = correct_b.all(axis=1)
    b = int((correct_a & ~correct_b).sum())
    c = int((~correct_a & correct_b).sum())

    if b + c < 25:
        statistic = float(min(b, c))
        raw_p = _exact_binomial_p(b, c)
        method = "exact"
    else:
        statistic = (abs(b - c) - 1.0) ** 2 / (b + c)
        raw_p = math.erfc(math.sqrt(statistic / 2.0))  # chi2 sf with 1 dof
        method = "chi2"
    corrected = min(1.0, raw_p * n_comparisons)
    return McNemarResult(
        statistic=statistic,
        raw_p=raw_p,
        corrected_p=corrected,
        significant=corrected < alpha,
        b=b,
        c=c,
        method=method,
    )


def frequency_bins(
    report: MetricReport,
    train_counts: Mapping[str, int],
    n_bins: int = 10,
) -> list[dict]:
    """Plot data: per-code F1 binned by log training frequency, with the
    standard deviation of scores inside each bin."""
    pairs = [
        (math.log(train_counts[code]), f1)
        for code, f1 in report.per_code_f1.items()
        if train_counts.get(code, 0) >= 1
    ]
    if not pairs:
        raise DataError("no codes with training counts >= 1")
    xs = np.asarray([p[0] for p in pairs])
    ys = np.asarray([p[1] for p in pairs])
    edges = np.linspace(xs.min(), xs.max() + 1e-9, n_bins + 1)
    rows = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        mask = (xs >= lo) & (xs < hi)
        if not mask.any():
            continue
        rows.append(
            {
                "log_count_low": float(lo),
                "log_count_high": float(hi),
                "mean_f1": float(ys[mask].mean()),
                "std_f1": float(ys[mask].std()),
                "n_codes": int(mask.sum()),
            }
        )
    return rows


def length_bins(
    preds: PredictionSet,
    boundary: float,
    word_counts: Mapping[str, int],
    bin_width: int = 500,
) -> list[dict]:
    """Plot data: per-document F1 binned by word count, plus the document
    histogram the bins imply."""
    f1, defined = per_document_f1(preds, boundary)
    pairs = [
        (word_counts[doc_id], float(f1[i]))
        for i, doc_id in enumerate(preds.doc_ids)
        if doc_id in word_counts and defined[i]
    ]
    if not pairs:
        raise DataError("no documents with defined per-document F1 and a word count")
    rows = []
    max_count = max(p[0] for p in pairs)
    edge = 0
    while edge <= max_count:
        inside = [f for c, f in pairs if edge <= c < edge + bin_width]
        if inside:
            rows.append(
                {
                    "words_low": edge,
                    "words_high": edge + bin_width,
                    "mean_f1": float(np.mean(inside)),
                    "n_docs": len(inside),
                }
            )
        edge += bin_width
    return rows


def training_size_curve(
    corpus: Corpus,
    split: SplitAssignment,
    sizes: Sequence[int],
    model_config: ModelConfig,
    train_config: TrainConfig,
    grid_step: float = 0.01,
    policy: MetricPolicy | None = None,
    threads: int = 1,
) -> list[dict]:
    """Retrain on nested stratified subsets of the train set; score the fixed test set.

    The boundary is re-tuned per size on validation, and each size trains
    with seed + index so runs stay independent but reproducible.
    """
    if list(sizes) != sorted(sizes):
        raise DataError("sizes must be ascending")
    train_doc_ids = {d for d, s in split.assignment.items() if s == "train"}
    if sizes and sizes[-1] > len(train_doc_ids):
        raise DataError(f"largest size {sizes[-1]} exceeds train size {len(train_doc_ids)}")
    if policy is None:
        policy = MetricPolicy()

    results = []
    for i, size in enumerate(sizes):
        selection = stratified_subset(corpus, train_doc_ids, size, seed=train_config.seed + i)
        assignment = {
            doc_id: subset
            for doc_id, subset in split.assignment.items()
            if subset != "train" or doc_id in selection.doc_ids
        }
        sub_split = SplitAssignment(assignment=assignment, ratios=split.ratios, seed=split.seed)
        run_config = replace(train_config, seed=train_config.seed + i)
        outcome = train(corpus, sub_split, model_config, run_config, threads=threads)
        if train_config.boundary_tuning:
            boundary = tune(outcome.val, grid_step).best_boundary
        else:
            boundary = 0.5
        counts = confusion_counts(outcome.test, boundary)
        eval_policy = MetricPolicy(
            boundary=boundary, macro_formula=policy.macro_formula, missing_class=policy.missing_class
        )
        results.append(
            {
                "size": int(size),
                "boundary": boundary,
                "micro_f1": f1_micro(counts),
                "macro_f1": f1_macro(counts, eval_policy),
                "n_patients_split": selection.n_patients_split,
            }
        )
    return results
