"""Multi-label evaluation metrics under explicit, switchable policies.

The macro F1 score exists in two forms here: ``arithmetic`` (the mean of
per-code F1 scores) and ``harmonic_of_means`` (the harmonic mean of macro
precision and macro recall, kept for comparison because it rewards heavily
biased classifiers on unbalanced label sets). Codes without positive
targets ("missing") are either excluded from macro averages (``ignore``)
or scored zero (``zero_fill``).

Conventions fixed for determinism: thresholding is strict (score > boundary
predicts positive), ranked metrics break score ties by ascending code-column
index, and per-code F1 with a zero denominator is 0.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from icdkit.errors import DataError, NumericError

__all__ = [
    "ConfusionCounts",
    "MetricPolicy",
    "MetricReport",
    "PredictionSet",
    "auc_roc",
    "confusion_counts",
    "evaluate",
    "exact_match_ratio",
    "f1_macro",
    "f1_micro",
    "mean_average_precision",
    "midranks",
    "per_code_f1",
    "per_code_report",
    "precision_at_k",
    "r_precision",
    "read_prediction_set",
    "write_prediction_set",
]

MACRO_FORMULAS = ("arithmetic", "harmonic_of_means")
MISSING_POLICIES = ("ignore", "zero_fill")


@dataclass(frozen=True)
class MetricPolicy:
    """The switches that change what a reported number means."""

    boundary: float = 0.5
    macro_formula: str = "arithmetic"
    missing_class: str = "ignore"

    def __post_init__(self) -> None:
        if not (0.0 < self.boundary < 1.0):
            raise DataError(f"boundary must lie in (0, 1), got {self.boundary}")
        if self.macro_formula not in MACRO_FORMULAS:
            raise DataError(f"macro_formula must be one of {MACRO_FORMULAS}")
        if self.missing_class not in MISSING_POLICIES:
            raise DataError(f"missing_class must be one of {MISSING_POLICIES}")

    def to_json_dict(self) -> dict:
        return {
            "boundary": self.boundary,
            "macro_formula": self.macro_formula,
            "missing_class": self.missing_class,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "MetricPolicy":
        known = {"boundary", "macro_formula", "missing_class"}
        unknown = set(data) - known
        if unknown:
            raise DataError(f"unknown policy field(s): {', '.join(sorted(unknown))}")
        return cls(**data)


@dataclass
class PredictionSet:
    """Aligned (documents x codes) score matrix with binary targets.

    The interchange object between models, the tuner, metrics, and the
    analyses. Column order is fixed by ``code_universe``.
    """

    doc_ids: list[str]
    code_universe: list[str]
    scores: np.ndarray
    targets: np.ndarray

    def __post_init__(self) -> None:
        self.scores = np.asarray(self.scores, dtype=float)
        self.targets = np.asarray(self.targets)
        expected = (len(self.doc_ids), len(self.code_universe))
        if self.scores.shape != expected or self.targets.shape != expected:
            raise DataError(
                f"scores/targets must have shape {expected}, got "
                f"{self.scores.shape} and {self.targets.shape}"
            )
        if self.scores.size:
            if self.scores.min() < 0.0 or self.scores.max() > 1.0:
                raise DataError("scores must lie in [0, 1]")
            if not np.isin(self.targets, (0, 1)).all():
                raise DataError("targets must be binary")
        self.targets = self.targets.astype(np.int8)

    @property
    def n_docs(self) -> int:
        return len(self.doc_ids)

    @property
    def n_codes(self) -> int:
        return len(self.code_universe)


@dataclass(frozen=True)
class ConfusionCounts:
    """Per-code confusion counts; each column sums to the document count."""

    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray

    @property
    def missing_mask(self) -> np.ndarray:
        """Codes with no positive targets at all."""
        return (self.tp + self.fn) == 0


def confusion_counts(preds: PredictionSet, boundary: float) -> ConfusionCounts:
    """Threshold scores strictly (score > boundary) and count per code."""
    predicted = preds.scores > boundary
    actual = preds.targets.astype(bool)
    tp = (predicted & actual).sum(axis=0).astype(np.int64)
    fp = (predicted & ~actual).sum(axis=0).astype(np.int64)
    fn = (~predicted & actual).sum(axis=0).astype(np.int64)
    tn = (~predicted & ~actual).sum(axis=0).astype(np.int64)
    return ConfusionCounts(tp=tp, fp=fp, fn=fn, tn=tn)


def f1_micro(counts: ConfusionCounts) -> float:
    """Pooled F1 over all (document, code) cells; 0 when the denominator is 0."""
    numer = 2.0 * counts.tp.sum()
    denom = 2.0 * counts.tp.sum() + counts.fp.sum() + counts.fn.sum()
    return float(numer / denom) if denom > 0 else 0.0


def per_code_f1(counts: ConfusionCounts) -> np.ndarray:
    denom = 2.0 * counts.tp + counts.fp + counts.fn
    with np.errstate(invalid="ignore", divide="ignore"):
        f1 = np.where(denom > 0, 2.0 * counts.tp / np.where(denom > 0, denom, 1), 0.0)
    return f1


def _safe_divide(numer: np.ndarray, denom: np.ndarray) -> np.ndarray:
    return np.where(denom > 0, numer / np.where(denom > 0, denom, 1), 0.0)


def f1_macro(counts: ConfusionCounts, policy: MetricPolicy) -> float:
    """Macro F1 under the policy's formula and missing-class handling.

    ``arithmetic``: mean of per-code F1 over the included codes.
    ``harmonic_of_means``: 2*P*R/(P+R) where P and R are the means of
    per-code precision and recall over the included codes.
    ``ignore`` drops codes with no positive targets; ``zero_fill`` keeps
    them, scoring 0 (which caps the achievable macro F1 at the fraction
    of codes actually present).
    """
    missing = counts.missing_mask
    if policy.missing_class == "ignore":
        included = ~missing
        if not included.any():
            raise NumericError("no evaluable codes: every code is missing from the targets")
    else:
        included = np.ones_like(missing, dtype=bool)

    if policy.macro_formula == "arithmetic":
        f1 = per_code_f1(counts)
        values = np.where(missing, 0.0, f1)[included]
        return float(values.mean())

    precision = np.where(missing, 0.0, _safe_divide(counts.tp, counts.tp + counts.fp))[included]
    recall = np.where(missing, 0.0, _safe_divide(counts.tp, counts.tp + counts.fn))[included]
    p_bar = float(precision.mean())
    r_bar = float(recall.mean())
    if p_bar + r_bar == 0.0:
        return 0.0
    return 2.0 * p_bar * r_bar / (p_bar + r_bar)


def midranks(values: np.ndarray) -> np.ndarray:
    """Ranks starting at 1, with tied values sharing the mean of their ranks."""
    values = np.asarray(values)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=float)
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _auc_from_ranks(scores: np.ndarray, targets: np.ndarray) -> float:
    """Rank-statistic AUC with midrank tie handling."""
    n_pos = int(targets.sum())
    n_neg = len(targets) - n_pos
    ranks = midranks(scores)
    pos_rank_sum = float(ranks[targets.astype(bool)].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def _valid_auc_codes(targets: np.ndarray) -> np.ndarray:
    positives = targets.sum(axis=0)
    return (positives > 0) & (positives < targets.shape[0])


def auc_roc(preds: PredictionSet, averaging: str = "micro", missing_class: str = "ignore") -> float:
    """AUC-ROC. AUC of a code without both classes is undefined, so macro
    averaging always excludes such codes, under either missing-class policy
    (zero-filling an AUC has no principled value; the exclusion count is
    surfaced by :func:`evaluate`)."""
    if averaging not in ("micro", "macro"):
        raise DataError(f"averaging must be micro or macro, got {averaging!r}")
    if missing_class not in MISSING_POLICIES:
        raise DataError(f"missing_class must be one of {MISSING_POLICIES}")
    if averaging == "micro":
        flat_scores = preds.scores.ravel()
        flat_targets = preds.targets.ravel()
        n_pos = int(flat_targets.sum())
        if n_pos == 0 or n_pos == flat_targets.size:
            raise NumericError("AUC undefined: targets are single-class")
        return _auc_from_ranks(flat_scores, flat_targets)

    valid = _valid_auc_codes(preds.targets)
    if not valid.any():
        raise NumericError("AUC undefined: no code has both classes present")
    aucs = [
        _auc_from_ranks(preds.scores[:, j], preds.targets[:, j])
        for j in np.flatnonzero(valid)
    ]
    return float(np.mean(aucs))


def _ranking(scores_row: np.ndarray) -> np.ndarray:
    """Column indices by descending score; ties broken by ascending index."""
    return np.argsort(-scores_row, kind="stable")


def precision_at_k(preds: PredictionSet, k: int) -> float:
    """Mean over documents of the fraction of the top-k codes that are relevant."""
    if not (1 <= k <= preds.n_codes):
        raise DataError(f"k must lie in [1, {preds.n_codes}], got {k}")
    if preds.n_docs == 0:
        raise DataError("empty prediction set")
    hits = [
        preds.targets[i, _ranking(preds.scores[i])[:k]].sum() / k
        for i in range(preds.n_docs)
    ]
    return float(np.mean(hits))


def r_precision(preds: PredictionSet) -> float:
    """Precision among the top-R codes, R the document's relevant-code count.

    Documents without relevant codes are skipped (the ratio is undefined).
    """
    values = []
    for i in range(preds.n_docs):
        r = int(preds.targets[i].sum())
        if r == 0:
            continue
        values.append(preds.targets[i, _ranking(preds.scores[i])[:r]].sum() / r)
    if not values:
        raise NumericError("R-precision undefined: every document has zero relevant codes")
    return float(np.mean(values))


def mean_average_precision(preds: PredictionSet) -> float:
    """Mean over documents (with >= 1 relevant code) of average precision."""
    ap_values = []
    for i in range(preds.n_docs):
        relevant = preds.targets[i].astype(bool)
        r = int(relevant.sum())
        if r == 0:
            continue
        ranked = _ranking(preds.scores[i])
        rel_at_rank = relevant[ranked]
        cum_hits = np.cumsum(rel_at_rank)
        precisions = cum_hits[rel_at_rank] / (np.flatnonzero(rel_at_rank) + 1.0)
        ap_values.append(precisions.mean())
    if not ap_values:
        raise NumericError("MAP undefined: every document has zero relevant codes")
    return float(np.mean(ap_values))


def exact_match_ratio(preds: PredictionSet, boundary: float) -> float:
    """Fraction of documents whose whole thresholded row matches the targets."""
    if preds.n_docs == 0:
        raise DataError("empty prediction set")
    predicted = preds.scores > boundary
    matches = (predicted == preds.targets.astype(bool)).all(axis=1)
    return float(matches.mean())


@dataclass
class MetricReport:
    """Every metric value plus the policy and bookkeeping that produced them."""

    policy: MetricPolicy
    values: dict[str, float]
    per_code_f1: dict[str, float]
    per_code_counts: dict[str, tuple[int, int, int, int]]  # tp, fp, fn, tn
    missing_codes: list[str]
    n_missing_codes: int
    n_docs_skipped_ranking: int = 0
    n_auc_excluded: int = 0

    def to_json_dict(self) -> dict:
        return {
            "policy": self.policy.to_json_dict(),
            "values": self.values,
            "per_code_f1": self.per_code_f1,
            "per_code_counts": {c: list(v) for c, v in self.per_code_counts.items()},
            "missing_codes": self.missing_codes,
            "n_missing_codes": self.n_missing_codes,
            "n_docs_skipped_ranking": self.n_docs_skipped_ranking,
            "n_auc_excluded": self.n_auc_excluded,
        }


def per_code_report(preds: PredictionSet, policy: MetricPolicy) -> MetricReport:
    """Report carrying only the confusion-based per-code fields.

    The per-code analyses (frequency correlation, chapter grouping) need
    per-code F1 and counts but none of the ranking metrics, whose
    preconditions (k <= number of codes, both AUC classes present) may not
    hold on their inputs.
    """
    counts = confusion_counts(preds, policy.boundary)
    f1_per_code = per_code_f1(counts)
    missing = counts.missing_mask
    return MetricReport(
        policy=policy,
        values={"f1_micro": f1_micro(counts)},
        per_code_f1={code: float(f1_per_code[j]) for j, code in enumerate(preds.code_universe)},
        per_code_counts={
            code: (int(counts.tp[j]), int(counts.fp[j]), int(counts.fn[j]), int(counts.tn[j]))
            for j, code in enumerate(preds.code_universe)
        },
        missing_codes=[code for j, code in enumerate(preds.code_universe) if missing[j]],
        n_missing_codes=int(missing.sum()),
        n_docs_skipped_ranking=int((preds.targets.sum(axis=1) == 0).sum()),
        n_auc_excluded=int((~_valid_auc_codes(preds.targets)).sum()),
    )


def evaluate(preds: PredictionSet, policy: MetricPolicy, ks: tuple[int, ...] = (8, 15)) -> MetricReport:
    """Run the full metric battery under one policy."""
    counts = confusion_counts(preds, policy.boundary)
    f1_per_code = per_code_f1(counts)
    missing = counts.missing_mask

    values: dict[str, float] = {
        "f1_micro": f1_micro(counts),
        "f1_macro": f1_macro(counts, policy),
        "auc_micro": auc_roc(preds, "micro", policy.missing_class),
        "auc_macro": auc_roc(preds, "macro", policy.missing_class),
        "emr": exact_match_ratio(preds, policy.boundary),
        "r_precision": r_precision(preds),
        "map": mean_average_precision(preds),
    }
    for k in ks:
        values[f"precision_at_{k}"] = precision_at_k(preds, k)

    n_skipped = int((preds.targets.sum(axis=1) == 0).sum())
    n_auc_excluded = int((~_valid_auc_codes(preds.targets)).sum())
    return MetricReport(
        policy=policy,
        values=values,
        per_code_f1={code: float(f1_per_code[j]) for j, code in enumerate(preds.code_universe)},
        per_code_counts={
            code: (int(counts.tp[j]), int(counts.fp[j]), int(counts.fn[j]), int(counts.tn[j]))
            for j, code in enumerate(preds.code_universe)
        },
        missing_codes=[code for j, code in enumerate(preds.code_universe) if missing[j]],
        n_missing_codes=int(missing.sum()),
        n_docs_skipped_ranking=n_skipped,
        n_auc_excluded=n_auc_excluded,
    )


def report_to_markdown(report: MetricReport) -> str:
    """One-row markdown table: classification block, then the ranking block."""
    columns = [
        (label, key)
        for label, key in [
            ("AUC Micro", "auc_micro"),
            ("AUC Macro", "auc_macro"),
            ("F1 Micro", "f1_micro"),
            ("F1 Macro", "f1_macro"),
            ("EMR", "emr"),
        ]
        if key in report.values
    ]
    ks = sorted(
        int(key.rsplit("_", 1)[1]) for key in report.values if key.startswith("precision_at_")
    )
    columns += [(f"P@{k}", f"precision_at_{k}") for k in ks]
    columns += [(label, key) for label, key in [("R-Precision", "r_precision"), ("MAP", "map")] if key in report.values]
    header = "| " + " | ".join(label for label, _ in columns) + " |"
    rule = "|" + "|".join(" --- " for _ in columns) + "|"
    row = "| " + " | ".join(f"{report.values[key] * 100:.1f}" for _, key in columns) + " |"
    return "\n".join([header, rule, row]) + "\n"


def validate_report_dict(data: dict) -> None:
    """Schema check for a serialized report; raises DataError on violation."""
    required = {
        "policy": dict,
        "values": dict,
        "per_code_f1": dict,
        "per_code_counts": dict,
        "missing_codes": list,
        "n_missing_codes": int,
    }
    for key, kind in required.items():
        if key not in data:
            raise DataError(f"report missing key {key!r}")
        if not isinstance(data[key], kind):
            raise DataError(f"report key {key!r} must be {kind.__name__}")
    for name, value in data["values"].items():
        if not isinstance(value, (int, float)) or not (0.0 <= value <= 1.0):
            raise DataError(f"metric {name!r} out of range: {value!r}")
    MetricPolicy.from_json_dict(data["policy"])


def write_prediction_set(preds: PredictionSet, path: str | Path) -> None:
    """Serialize as a header line {"codes": [...]} plus one line per document."""
    with Path(path).open("w", encoding="utf-8", newline="\n") as handle:
        handle.write(json.dumps({"codes": list(preds.code_universe)}) + "\n")
        for i, doc_id in enumerate(preds.doc_ids):
            record = {
                "doc_id": doc_id,
                "scores": [float(s) for s in preds.scores[i]],
                "targets": [int(t) for t in preds.targets[i]],
            }
            handle.write(json.dumps(record) + "\n")


def read_prediction_set(path: str | Path) -> PredictionSet:
    """Read the line-JSON format; scores may be dense or sparse [[index, score], ...]."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"prediction file not found: {path}")
    with path.open("r", encoding="utf-8") as handle:
        header_line = handle.readline()
        try:
            header = json.loads(header_line)
            codes = header["codes"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DataError(f"{path}: first line must be a JSON object with a codes array") from exc
        n_codes = len(codes)
        doc_ids: list[str] = []
        score_rows: list[np.ndarray] = []
        target_rows: list[list[int]] = []
        for lineno, line in enumerate(handle, start=2):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path} line {lineno}: malformed JSON") from exc
            for key in ("doc_id", "scores", "targets"):
                if key not in record:
                    raise DataError(f"{path} line {lineno}: missing {key!r}")
            raw_scores = record["scores"]
            if raw_scores and isinstance(raw_scores[0], list):
                row = np.zeros(n_codes)
                for index, score in raw_scores:
                    if not (0 <= index < n_codes):
                        raise DataError(f"{path} line {lineno}: sparse index {index} out of range")
                    row[index] = score
            else:
                if len(raw_scores) != n_codes:
                    raise DataError(f"{path} line {lineno}: expected {n_codes} scores")
                row = np.asarray(raw_scores, dtype=float)
            if len(record["targets"]) != n_codes:
                raise DataError(f"{path} line {lineno}: expected {n_codes} targets")
            doc_ids.append(record["doc_id"])
            score_rows.append(row)
            target_rows.append(record["targets"])
    if not doc_ids:
        raise DataError(f"{path}: no document records")
    return PredictionSet(
        doc_ids=doc_ids,
        code_universe=list(codes),
        scores=np.vstack(score_rows),
        targets=np.asarray(target_rows),
    )
