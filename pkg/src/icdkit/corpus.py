"""Document collections with multi-label code annotations.

Covers JSONL ingestion/emission, text preprocessing, rare-code filtering,
summary statistics, code-system metadata, and a seeded synthetic corpus
generator whose label frequencies follow a power law and whose documents
are learnable by construction (dedicated trigger tokens per code).
"""

from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from icdkit.errors import DataError

__all__ = [
    "CodeSystem",
    "CodeSystemEntry",
    "Corpus",
    "CorpusStats",
    "Document",
    "SyntheticSpec",
    "emit",
    "filter_rare_codes",
    "ingest",
    "load_code_system",
    "preprocess",
    "stats",
    "synthesize",
]


@dataclass
class Document:
    """One clinical note: identifier, owner, text, and its set of codes.

    ``tokens`` stays empty until :func:`preprocess` has been run.
    """

    doc_id: str
    patient_id: str
    raw_text: str
    tokens: list[str] = field(default_factory=list)
    codes: frozenset[str] = frozenset()


@dataclass(frozen=True)
class CodeSystemEntry:
    code: str
    description: str
    chapter_id: str
    chapter_label: str
    category: str
    kind: str  # "diagnosis" | "procedure"
    version: str  # "ICD-9" | "ICD-10"


@dataclass
class CodeSystem:
    """Code metadata with the chapter/category hierarchy used for aggregation."""

    entries: dict[str, CodeSystemEntry]

    def __contains__(self, code: str) -> bool:
        return code in self.entries

    def chapter_of(self, code: str) -> str:
        try:
            return self.entries[code].chapter_id
        except KeyError:
            raise DataError(f"code {code!r} not present in the code system") from None


@dataclass
class Corpus:
    """Documents plus the ordered code universe that fixes column indices.

    ``code_universe`` equals the union of the documents' code sets; its
    order is stable and defines the label columns everywhere downstream.
    """

    documents: list[Document]
    code_universe: list[str]
    code_system: CodeSystem | None = None

    def __len__(self) -> int:
        return len(self.documents)

    def code_counts(self) -> Counter:
        """Document frequency of every code (each document counts once)."""
        counts: Counter = Counter()
        for doc in self.documents:
            counts.update(doc.codes)
        return counts


@dataclass(frozen=True)
class CorpusStats:
    n_documents: int
    n_patients: int
    n_unique_codes: int
    codes_per_instance_median_iqr: tuple[float, float, float]  # (median, q1, q3)
    words_per_document_median_iqr: tuple[float, float, float]

    def to_json_dict(self) -> dict:
        return {
            "n_documents": self.n_documents,
            "n_patients": self.n_patients,
            "n_unique_codes": self.n_unique_codes,
            "codes_per_instance": {
                "median": self.codes_per_instance_median_iqr[0],
                "q1": self.codes_per_instance_median_iqr[1],
                "q3": self.codes_per_instance_median_iqr[2],
            },
            "words_per_document": {
                "median": self.words_per_document_median_iqr[0],
                "q1": self.words_per_document_median_iqr[1],
                "q3": self.words_per_document_median_iqr[2],
            },
        }


REQUIRED_RECORD_KEYS = ("doc_id", "patient_id", "text", "codes")


def ingest(path: str | Path) -> Corpus:
    """Read a JSONL corpus: one object per line with doc_id/patient_id/text/codes.

    Codes are deduplicated silently (sets, not multisets). The code universe
    is the sorted union of all document code sets. Tokens are left empty.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"corpus file not found: {path}")
    documents: list[Document] = []
    seen_ids: set[str] = set()
    with path.open("r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"line {lineno}: malformed JSON ({exc.msg})") from exc
            if not isinstance(record, dict):
                raise DataError(f"line {lineno}: expected a JSON object")
            missing = [k for k in REQUIRED_RECORD_KEYS if k not in record]
            if missing:
                raise DataError(f"line {lineno}: missing field(s) {', '.join(missing)}")
            doc_id = record["doc_id"]
            if not isinstance(doc_id, str) or not doc_id:
                raise DataError(f"line {lineno}: doc_id must be a non-empty string")
            if doc_id in seen_ids:
                raise DataError(f"duplicate doc_id {doc_id!r} (line {lineno})")
            seen_ids.add(doc_id)
            codes = record["codes"]
            if not isinstance(codes, list) or any(not isinstance(c, str) for c in codes):
                raise DataError(f"line {lineno}: codes must be an array of strings")
            documents.append(
                Document(
                    doc_id=doc_id,
                    patient_id=str(record["patient_id"]),
                    raw_text=str(record["text"]),
                    codes=frozenset(codes),
                )
            )
    universe = sorted(set().union(*(d.codes for d in documents)) if documents else set())
    return Corpus(documents=documents, code_universe=universe)


def emit(corpus: Corpus, path: str | Path) -> None:
    """Write a corpus back to JSONL, mirroring the input plus a tokens array."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as handle:
        for doc in corpus.documents:
            record = {
                "doc_id": doc.doc_id,
                "patient_id": doc.patient_id,
                "text": doc.raw_text,
                "codes": sorted(doc.codes),
                "tokens": doc.tokens,
            }
            handle.write(json.dumps(record) + "\n")


def _keep_token(token: str) -> bool:
    # A token survives iff it contains at least one character in [a-z]
    # (it has already been lowercased); pure digit/punctuation tokens drop.
    return any("a" <= ch <= "z" for ch in token)


def tokenize_text(text: str, max_words: int | None = None) -> list[str]:
    """Lowercase, whitespace-split, drop alphabet-free tokens, then truncate."""
    tokens = [t for t in text.lower().split() if _keep_token(t)]
    if max_words is not None:
        tokens = tokens[:max_words]
    return tokens


def preprocess(corpus: Corpus, max_words: int) -> Corpus:
    """Populate tokens from raw text. Pure: returns a new corpus.

    Truncation to ``max_words`` happens after dropping alphabet-free tokens.
    Empty documents are permitted and yield empty token lists.
    """
    if max_words < 1:
        raise DataError(f"max_words must be >= 1, got {max_words}")
    documents = [
        Document(
            doc_id=doc.doc_id,
            patient_id=doc.patient_id,
            raw_text=doc.raw_text,
            tokens=tokenize_text(doc.raw_text, max_words),
            codes=doc.codes,
        )
        for doc in corpus.documents
    ]
    return Corpus(documents=documents, code_universe=list(corpus.code_universe), code_system=corpus.code_system)


def filter_rare_codes(corpus: Corpus, min_count: int) -> Corpus:
    """Drop codes whose corpus-wide document frequency is below ``min_count``.

    Documents left with zero codes are retained; they contribute negatives.
    """
    if min_count < 1:
        raise DataError(f"min_count must be >= 1, got {min_count}")
    counts = corpus.code_counts()
    surviving = {code for code, n in counts.items() if n >= min_count}
    if not surviving:
        raise DataError("empty code universe: every code falls below min_count")
    documents = [
        Document(
            doc_id=doc.doc_id,
            patient_id=doc.patient_id,
            raw_text=doc.raw_text,
            tokens=list(doc.tokens),
            codes=frozenset(c for c in doc.codes if c in surviving),
        )
        for doc in corpus.documents
    ]
    universe = [c for c in corpus.code_universe if c in surviving]
    return Corpus(documents=documents, code_universe=universe, code_system=corpus.code_system)


def _median_iqr(values: list[int]) -> tuple[float, float, float]:
    arr = np.asarray(values, dtype=float)
    # Linear-interpolation quantiles (positions 0.25/0.75 of n-1).
    median, q1, q3 = np.quantile(arr, [0.5, 0.25, 0.75])
    return float(median), float(q1), float(q3)


def stats(corpus: Corpus, tokenized: bool = False) -> CorpusStats:
    """Summary statistics: document/patient/code counts plus median (IQR) spreads.

    With ``tokenized=True`` word counts use the preprocessed token lists,
    otherwise the whitespace word count of the raw text.
    """
    if not corpus.documents:
        raise DataError("cannot compute statistics of an empty corpus")
    code_counts = [len(doc.codes) for doc in corpus.documents]
    if tokenized:
        word_counts = [len(doc.tokens) for doc in corpus.documents]
    else:
        word_counts = [len(doc.raw_text.split()) for doc in corpus.documents]
    return CorpusStats(
        n_documents=len(corpus.documents),
        n_patients=len({doc.patient_id for doc in corpus.documents}),
        n_unique_codes=len(corpus.code_universe),
        codes_per_instance_median_iqr=_median_iqr(code_counts),
        words_per_document_median_iqr=_median_iqr(word_counts),
    )


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a deterministic synthetic corpus.

    Code document-frequencies follow rank**(-zipf_exponent); every document
    carrying a code contains all of that code's trigger tokens, so the corpus
    is learnable by design. Patients own contiguous blocks of documents.
    """

    n_patients: int
    docs_per_patient_range: tuple[int, int]
    n_codes: int
    zipf_exponent: float
    trigger_tokens_per_code: int
    noise_token_count_range: tuple[int, int]
    doc_length_range: tuple[int, int]
    seed: int
    codes_per_doc_mean: float = 3.0
    noise_vocab_size: int = 200

    def validate(self) -> None:
        if self.n_patients < 1:
            raise DataError("n_patients must be >= 1")
        if self.n_codes < 2:
            raise DataError("n_codes must be >= 2")
        if self.zipf_exponent <= 0:
            raise DataError("zipf_exponent must be > 0")
        if self.trigger_tokens_per_code < 1:
            raise DataError("trigger_tokens_per_code must be >= 1")
        for name in ("docs_per_patient_range", "noise_token_count_range", "doc_length_range"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise DataError(f"{name} must be a nonempty range, got ({lo}, {hi})")
        if self.docs_per_patient_range[0] < 1:
            raise DataError("docs_per_patient_range minimum must be >= 1")
        if self.doc_length_range[0] < 1:
            raise DataError("doc_length_range minimum must be >= 1")
        if self.codes_per_doc_mean <= 0:
            raise DataError("codes_per_doc_mean must be > 0")

    @classmethod
    def from_json_dict(cls, data: dict) -> "SyntheticSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise DataError(f"unknown synthetic spec field(s): {', '.join(sorted(unknown))}")
        kwargs = dict(data)
        for name in ("docs_per_patient_range", "noise_token_count_range", "doc_length_range"):
            if name in kwargs:
                kwargs[name] = tuple(kwargs[name])
        try:
            spec = cls(**kwargs)
        except TypeError as exc:
            raise DataError(f"invalid synthetic spec: {exc}") from exc
        spec.validate()
        return spec


def trigger_tokens(code_index: int, per_code: int) -> list[str]:
    """The dedicated vocabulary items planted for one code."""
    return [f"trg{code_index:04d}q{j}" for j in range(per_code)]


def synthesize(spec: SyntheticSpec) -> Corpus:
    """Generate a corpus deterministically from ``spec``.

    Each code c (rank r, zero-based) is included in a document independently
    with probability proportional to (r+1)**(-zipf_exponent), scaled so the
    expected number of codes per document is ``codes_per_doc_mean`` and
    capped at 0.95. Trigger tokens for every carried code are mixed with
    noise tokens and shuffled; the final document length is clamped into
    ``doc_length_range``.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    codes = [f"C{i:04d}" for i in range(spec.n_codes)]
    triggers = {c: trigger_tokens(i, spec.trigger_tokens_per_code) for i, c in enumerate(codes)}
    noise_pool = [f"filler{i:04d}" for i in range(spec.noise_vocab_size)]

    ranks = np.arange(1, spec.n_codes + 1, dtype=float)
    weights = ranks ** (-spec.zipf_exponent)
    inclusion = np.clip(weights * (spec.codes_per_doc_mean / weights.sum()), 0.0, 0.95)

    len_lo, len_hi = spec.doc_length_range
    noise_lo, noise_hi = spec.noise_token_count_range
    docs_lo, docs_hi = spec.docs_per_patient_range

    documents: list[Document] = []
    doc_counter = 0
    for p in range(spec.n_patients):
        patient_id = f"P{p:05d}"
        n_docs = int(rng.integers(docs_lo, docs_hi + 1))
        for _ in range(n_docs):
            carried = np.nonzero(rng.random(spec.n_codes) < inclusion)[0]
            doc_codes = [codes[i] for i in carried]
            planted = [tok for c in doc_codes for tok in triggers[c]]
            if len(planted) > len_hi:
                raise DataError(
                    f"infeasible spec: document needs {len(planted)} trigger tokens "
                    f"but doc_length_range allows at most {len_hi}"
                )
            n_noise = int(rng.integers(noise_lo, noise_hi + 1))
            total = len(planted) + n_noise
            total = min(max(total, len_lo), len_hi)
            total = max(total, len(planted))
            n_noise = total - len(planted)
            noise = [noise_pool[i] for i in rng.integers(0, len(noise_pool), size=n_noise)]
            tokens = planted + noise
            order = rng.permutation(len(tokens))
            documents.append(
                Document(
                    doc_id=f"D{doc_counter:06d}",
                    patient_id=patient_id,
                    raw_text=" ".join(tokens[i] for i in order),
                    codes=frozenset(doc_codes),
                )
            )
            doc_counter += 1

    universe = sorted(set().union(*(d.codes for d in documents)) if documents else set())
    return Corpus(documents=documents, code_universe=universe)


CODE_SYSTEM_COLUMNS = ("code", "description", "chapter_id", "chapter_label", "category", "kind", "version")


def load_code_system(path: str | Path) -> CodeSystem:
    """Load code metadata from CSV with the standard seven-column header."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"code system file not found: {path}")
    entries: dict[str, CodeSystemEntry] = {}
    with path.open("r", encoding="utf-8", newline="") as handle:
        reader = csv.DictReader(handle)
        missing = [c for c in CODE_SYSTEM_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise DataError(f"code system CSV missing column(s): {', '.join(missing)}")
        for lineno, row in enumerate(reader, start=2):
            code = row["code"]
            if code in entries:
                raise DataError(f"duplicate code {code!r} in code system (line {lineno})")
            if row["kind"] not in ("diagnosis", "procedure"):
                raise DataError(f"line {lineno}: kind must be diagnosis or procedure")
            entries[code] = CodeSystemEntry(
                code=code,
                description=row["description"],
                chapter_id=row["chapter_id"],
                chapter_label=row["chapter_label"],
                category=row["category"],
                kind=row["kind"],
                version=row["version"],
            )
    return CodeSystem(entries=entries)


def write_code_system(code_system: CodeSystem, path: str | Path) -> None:
    """Inverse of :func:`load_code_system`; rows in code order."""
    with Path(path).open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(CODE_SYSTEM_COLUMNS)
        for code in sorted(code_system.entries):
            e = code_system.entries[code]
            writer.writerow([e.code, e.description, e.chapter_id, e.chapter_label, e.category, e.kind, e.version])
