"""Patient-grouped, multi-label stratified train/val/test splitting.

The unit of assignment is the patient: its label set is the union of its
documents' codes and its weight is its document count, so no patient can
ever straddle two subsets. The greedy loop repeatedly takes the currently
rarest unplaced label and hands its patients to the subset with the largest
remaining quota for that label (ties: largest total remaining capacity,
then a seeded uniform draw).
"""

from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from icdkit.corpus import Corpus, Document
from icdkit.errors import DataError

__all__ = [
    "SUBSET_NAMES",
    "DEFAULT_RATIOS",
    "SplitAssignment",
    "SplitAudit",
    "SubsetSelection",
    "audit",
    "read_split_csv",
    "stratified_split",
    "stratified_subset",
    "write_split_csv",
]

SUBSET_NAMES = ("train", "val", "test")

# Default proportions reproduce a roughly 73/11/17 document split with the
# test set double the validation set.
DEFAULT_RATIOS = (0.7286, 0.1057, 0.1657)


@dataclass
class SplitAssignment:
    assignment: dict[str, str]  # doc_id -> subset name
    ratios: tuple[float, ...]
    seed: int
    subset_names: tuple[str, ...] = SUBSET_NAMES

    def doc_ids(self, subset: str) -> list[str]:
        return [d for d, s in self.assignment.items() if s == subset]


@dataclass
class SplitAudit:
    n_documents: dict[str, int]
    fractions: dict[str, float]
    missing_codes: dict[str, float]
    label_divergence: dict[str, float]
    patient_overlap: dict[str, int]
    warnings: list[str] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "n_documents": self.n_documents,
            "fractions": self.fractions,
            "missing_codes": self.missing_codes,
            "label_divergence": self.label_divergence,
            "patient_overlap": self.patient_overlap,
            "warnings": self.warnings,
        }


@dataclass
class _PatientUnit:
    patient_id: str
    doc_ids: list[str]
    weight: int  # number of documents
    label_weights: Counter  # code -> number of this patient's documents with it


def _patient_units(documents: list[Document]) -> list[_PatientUnit]:
    by_patient: dict[str, _PatientUnit] = {}
    for doc in documents:
        unit = by_patient.get(doc.patient_id)
        if unit is None:
            unit = _PatientUnit(doc.patient_id, [], 0, Counter())
            by_patient[doc.patient_id] = unit
        unit.doc_ids.append(doc.doc_id)
        unit.weight += 1
        unit.label_weights.update(doc.codes)
    return [by_patient[pid] for pid in sorted(by_patient)]


def _validate_ratios(ratios: tuple[float, ...]) -> None:
    if any(r <= 0 for r in ratios):
        raise DataError(f"ratios must be positive, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"ratios must sum to 1 within 1e-9, got sum {sum(ratios)!r}")


def _iterative_stratify(
    units: list[_PatientUnit],
    labels: list[str],
    ratios: tuple[float, ...],
    rng: np.random.Generator,
) -> list[int]:
    """Assign every unit a subset index using greedy iterative stratification.

    Quotas are real-valued and decremented by per-patient document counts,
    so heavyweight patients are charged for every document they bring.
    """
    n_subsets = len(ratios)
    total_docs = sum(u.weight for u in units)
    label_totals: Counter = Counter()
    for u in units:
        label_totals.update(u.label_weights)

    label_quota = [{lab: r * label_totals[lab] for lab in labels} for r in ratios]
    capacity = [r * total_docs for r in ratios]
    assigned: list[int] = [-1] * len(units)
    unplaced: set[int] = set(range(len(units)))

    def place(idx: int, subset: int) -> None:
        assigned[idx] = subset
        unit = units[idx]
        capacity[subset] -= unit.weight
        quota = label_quota[subset]
        for lab, w in unit.label_weights.items():
            if lab in quota:
                quota[lab] -= w
        unplaced.discard(idx)

    def pick_subset(label: str | None) -> np.ndarray:
        # Subsets with exhausted document capacity only receive patients when
        # every subset is exhausted; this keeps sizes within one patient of
        # the requested ratios without giving up label balancing.
        open_subsets = [j for j in range(n_subsets) if capacity[j] > 0] or list(range(n_subsets))
        if label is None:
            keys = {j: (capacity[j],) for j in open_subsets}
        else:
            keys = {j: (label_quota[j].get(label, 0.0), capacity[j]) for j in open_subsets}
        best = max(keys.values())
        return np.asarray([j for j in open_subsets if keys[j] == best])

    while True:
        remaining: Counter = Counter()
        for idx in unplaced:
            remaining.update(units[idx].label_weights)
        remaining = Counter({lab: w for lab, w in remaining.items() if w > 0})
        if not remaining:
            break
        # Rarest label first; lexicographic label order settles ties.
        rarest = min(remaining, key=lambda lab: (remaining[lab], lab))
        holders = sorted(
            (idx for idx in unplaced if units[idx].label_weights.get(rarest, 0) > 0),
            key=lambda idx: units[idx].patient_id,
        )
        rng.shuffle(holders)
        for idx in holders:
            tied = pick_subset(rarest)
            subset = int(tied[rng.integers(len(tied))]) if len(tied) > 1 else int(tied[0])
            place(idx, subset)

    # Label-free patients go wherever the most capacity remains.
    for idx in sorted(unplaced, key=lambda i: units[i].patient_id):
        tied = pick_subset(None)
        subset = int(tied[rng.integers(len(tied))]) if len(tied) > 1 else int(tied[0])
        place(idx, subset)

    return assigned


def stratified_split(
    corpus: Corpus,
    ratios: tuple[float, ...] = DEFAULT_RATIOS,
    seed: int = 0,
) -> SplitAssignment:
    """Produce a patient-disjoint stratified assignment of every document.

    Deterministic given (corpus, ratios, seed).
    """
    ratios = tuple(float(r) for r in ratios)
    _validate_ratios(ratios)
    if len(ratios) != len(SUBSET_NAMES):
        raise DataError(f"expected {len(SUBSET_NAMES)} ratios, got {len(ratios)}")
    if not corpus.documents:
        raise DataError("cannot split an empty corpus")

    units = _patient_units(corpus.documents)
    rng = np.random.default_rng(seed)
    assigned = _iterative_stratify(units, list(corpus.code_universe), ratios, rng)

    assignment: dict[str, str] = {}
    for unit, subset in zip(units, assigned):
        for doc_id in unit.doc_ids:
            assignment[doc_id] = SUBSET_NAMES[subset]
    # Reorder to corpus document order for stable serialization.
    assignment = {doc.doc_id: assignment[doc.doc_id] for doc in corpus.documents}
    return SplitAssignment(assignment=assignment, ratios=ratios, seed=seed)


def audit(corpus: Corpus, split: SplitAssignment) -> SplitAudit:
    """Recompute subset statistics from scratch; no splitter internals reused."""
    names = split.subset_names
    known_docs = {doc.doc_id for doc in corpus.documents}
    for doc_id in split.assignment:
        if doc_id not in known_docs:
            raise DataError(f"assignment references unknown doc_id {doc_id!r}")
    uncovered = known_docs - set(split.assignment)
    if uncovered:
        raise DataError(f"assignment does not cover {len(uncovered)} document(s), e.g. {sorted(uncovered)[0]!r}")

    docs_by_subset: dict[str, list[Document]] = {name: [] for name in names}
    for doc in corpus.documents:
        docs_by_subset[split.assignment[doc.doc_id]].append(doc)

    n_total = len(corpus.documents)
    universe = list(corpus.code_universe)
    global_counts = corpus.code_counts()

    n_documents = {name: len(docs) for name, docs in docs_by_subset.items()}
    fractions = {name: n_documents[name] / n_total for name in names}

    missing_codes: dict[str, float] = {}
    label_divergence: dict[str, float] = {}
    for name in names:
        counts: Counter = Counter()
        for doc in docs_by_subset[name]:
            counts.update(doc.codes)
        if universe:
            present = sum(1 for code in universe if counts[code] > 0)
            missing_codes[name] = 1.0 - present / len(universe)
            frac = fractions[name]
            label_divergence[name] = float(
                np.mean([abs(counts[code] - frac * global_counts[code]) for code in universe])
            )
        else:
            missing_codes[name] = 0.0
            label_divergence[name] = 0.0

    patients = {name: {doc.patient_id for doc in docs_by_subset[name]} for name in names}
    patient_overlap = {
        f"{a}/{b}": len(patients[a] & patients[b])
        for i, a in enumerate(names)
        for b in names[i + 1 :]
    }

    warnings: list[str] = []
    max_patient = max(Counter(doc.patient_id for doc in corpus.documents).values())
    if max_patient > max(split.ratios) * n_total:
        warnings.append(
            f"largest patient owns {max_patient} documents, exceeding "
            f"max(ratios)*N = {max(split.ratios) * n_total:.1f}; ratios unattainable"
        )

    return SplitAudit(
        n_documents=n_documents,
        fractions=fractions,
        missing_codes=missing_codes,
        label_divergence=label_divergence,
        patient_overlap=patient_overlap,
        warnings=warnings,
    )


@dataclass
class SubsetSelection:
    """Result of :func:`stratified_subset`: the chosen docs plus grouping deviation."""

    doc_ids: set[str]
    target_size: int
    n_patients_split: int


def stratified_subset(
    corpus: Corpus,
    train_docs: set[str],
    target_size: int,
    seed: int = 0,
) -> SubsetSelection:
    """Choose exactly ``target_size`` documents from ``train_docs``, stratified.

    Runs the same iterative-stratification procedure with two-way ratios
    (target/|train|, remainder), then moves a seeded-random handful of
    documents across the boundary to hit the size exactly. Patient grouping
    is therefore only approximate; the number of straddling patients is
    reported in the selection metadata.
    """
    if target_size == 0:
        raise DataError("target_size must be >= 1")
    pool = [doc for doc in corpus.documents if doc.doc_id in train_docs]
    if len(pool) != len(train_docs):
        raise DataError("train_docs contains doc_ids not present in the corpus")
    if target_size > len(pool):
        raise DataError(f"target_size {target_size} exceeds pool size {len(pool)}")
    if target_size == len(pool):
        return SubsetSelection(doc_ids=set(train_docs), target_size=target_size, n_patients_split=0)

    frac = target_size / len(pool)
    rng = np.random.default_rng(seed)
    units = _patient_units(pool)
    labels = sorted(set().union(*(d.codes for d in pool)))
    assigned = _iterative_stratify(units, labels, (frac, 1.0 - frac), rng)

    selected: list[str] = []
    remainder: list[str] = []
    patient_of: dict[str, str] = {}
    for unit, subset in zip(units, assigned):
        bucket = selected if subset == 0 else remainder
        bucket.extend(unit.doc_ids)
        for doc_id in unit.doc_ids:
            patient_of[doc_id] = unit.patient_id

    selected.sort()
    remainder.sort()
    moved: list[str] = []
    if len(selected) > target_size:
        excess = len(selected) - target_size
        drop = rng.choice(len(selected), size=excess, replace=False)
        moved = [selected[i] for i in sorted(drop)]
        selected = [d for i, d in enumerate(selected) if i not in set(drop)]
    elif len(selected) < target_size:
        deficit = target_size - len(selected)
        pull = rng.choice(len(remainder), size=deficit, replace=False)
        moved = [remainder[i] for i in sorted(pull)]
        selected = selected + moved

    chosen = set(selected)
    split_patients = {
        patient_of[d]
        for d in moved
        if any(patient_of[o] == patient_of[d] and (o in chosen) != (d in chosen) for o in patient_of)
    }
    return SubsetSelection(doc_ids=chosen, target_size=target_size, n_patients_split=len(split_patients))


def write_split_csv(split: SplitAssignment, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["doc_id", "subset"])
        for doc_id, subset in split.assignment.items():
            writer.writerow([doc_id, subset])


def read_split_csv(path: str | Path, ratios: tuple[float, ...] = DEFAULT_RATIOS, seed: int = 0) -> SplitAssignment:
    path = Path(path)
    if not path.exists():
        raise DataError(f"split file not found: {path}")
    assignment: dict[str, str] = {}
    with path.open("r", encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header != ["doc_id", "subset"]:
            raise DataError(f"unexpected split CSV header: {header}")
        for row in reader:
            if len(row) != 2:
                raise DataError(f"malformed split row: {row}")
            doc_id, subset = row
            if subset not in SUBSET_NAMES:
                raise DataError(f"unknown subset {subset!r} for doc {doc_id!r}")
            if doc_id in assignment:
                raise DataError(f"duplicate doc_id {doc_id!r} in split file")
            assignment[doc_id] = subset
    return SplitAssignment(assignment=assignment, ratios=tuple(ratios), seed=seed)


def write_audit_json(report: SplitAudit, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as handle:
        json.dump(report.to_json_dict(), handle, indent=2, sort_keys=True)
        handle.write("\n")
