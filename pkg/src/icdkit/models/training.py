"""Seeded training over a split corpus, and batch prediction.

Training is sequential over mini-batches; within a batch, per-document
forward/backward passes may run on a thread pool, with gradients reduced
in fixed document order so results are bit-identical at any thread count.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from icdkit.corpus import Corpus, Document
from icdkit.errors import ConfigError, DataError
from icdkit.metrics import PredictionSet
from icdkit.models.config import ModelConfig, TrainConfig
from icdkit.models.network import backward, bce_loss, forward, init_parameters
from icdkit.models.optim import AdamWState, adamw_step, lr_schedule
from icdkit.models.serialize import load_pretrained_embeddings
from icdkit.splits import SplitAssignment

__all__ = ["TrainResult", "build_vocab", "ordered_map", "predict", "train", "vectorize"]

UNK_TOKEN = "<unk>"


def ordered_map(fn: Callable, items: Sequence, threads: int = 1) -> list:
    """Map preserving input order; thread-parallel when threads > 1."""
    if threads <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def build_vocab(documents: Iterable[Document]) -> list[str]:
    """Sorted unique tokens with the unknown-word sentinel at index 0."""
    tokens: set[str] = set()
    for doc in documents:
        tokens.update(doc.tokens)
    tokens.discard(UNK_TOKEN)
    return [UNK_TOKEN] + sorted(tokens)


def vectorize(tokens: Sequence[str], index: dict[str, int]) -> np.ndarray:
    """Token indices; out-of-vocabulary maps to the sentinel, empty docs to [sentinel]."""
    if not tokens:
        return np.zeros(1, dtype=np.int64)
    return np.asarray([index.get(t, 0) for t in tokens], dtype=np.int64)


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    config: ModelConfig  # resolved: vocab_size and n_labels filled in
    vocab: list[str]
    val: PredictionSet
    test: PredictionSet
    final_train_loss: float
    n_updates: int


def _target_matrix(docs: Sequence[Document], code_universe: Sequence[str]) -> np.ndarray:
    column = {code: j for j, code in enumerate(code_universe)}
    Y = np.zeros((len(docs), len(code_universe)), dtype=np.int8)
    for i, doc in enumerate(docs):
        for code in doc.codes:
            if code in column:
                Y[i, column[code]] = 1
    return Y


def train(
    corpus: Corpus,
    split: SplitAssignment,
    model_config: ModelConfig,
    train_config: TrainConfig,
    threads: int = 1,
) -> TrainResult:
    """Train one model on the split's train subset; score val and test.

    Deterministic given the configs' seed: initialization, batch shuffling,
    and dropout all come from one seeded generator. The vocabulary is built
    from the training subset only.
    """
    model_config.validate()
    train_config.validate()
    subsets: dict[str, list[Document]] = {"train": [], "val": [], "test": []}
    for doc in corpus.documents:
        subset = split.assignment.get(doc.doc_id)
        if subset in subsets:
            subsets[subset].append(doc)
    if not subsets["train"]:
        raise DataError("training split is empty")

    vocab = build_vocab(subsets["train"])
    index = {tok: i for i, tok in enumerate(vocab)}
    config = replace(model_config, vocab_size=len(vocab), n_labels=len(corpus.code_universe))
    config.validate(resolved=True)

    rng = np.random.default_rng(train_config.seed)
    params = init_parameters(config, rng)
    if train_config.embeddings_path:
        _apply_pretrained(params, vocab, train_config.embeddings_path, config.d_e)

    train_ids = [vectorize(doc.tokens, index) for doc in subsets["train"]]
    train_targets = _target_matrix(subsets["train"], corpus.code_universe)

    n_train = len(train_ids)
    batches_per_epoch = math.ceil(n_train / train_config.batch_size)
    total_updates = batches_per_epoch * train_config.epochs
    if total_updates <= train_config.warmup_updates:
        raise ConfigError(
            f"warmup_updates ({train_config.warmup_updates}) must be smaller than "
            f"the total number of updates ({total_updates}); lower it or train longer"
        )

    state = AdamWState.zeros(params)
    update = 0
    final_loss = 0.0
    for _ in range(train_config.epochs):
        order = rng.permutation(n_train)
        epoch_loss = 0.0
        for start in range(0, n_train, train_config.batch_size):
            batch = order[start : start + train_config.batch_size]
            doc_rngs = rng.spawn(len(batch)) if train_config.dropout > 0 else [None] * len(batch)

            def run_one(job: tuple[int, np.random.Generator | None]) -> tuple[float, dict]:
                i, doc_rng = job
                trace = forward(
                    params,
                    config,
                    train_ids[i],
                    dropout=train_config.dropout,
                    rng=doc_rng,
                )
                loss = bce_loss(trace.probabilities, train_targets[i])
                return loss, backward(trace, params, config, train_targets[i])

            results = ordered_map(run_one, list(zip(batch, doc_rngs)), threads)
            scale = 1.0 / len(batch)
            grads = {name: np.zeros_like(p) for name, p in params.items()}
            batch_loss = 0.0
            for loss, doc_grads in results:  # fixed-order reduction
                batch_loss += loss * scale
                for name in grads:
                    grads[name] += doc_grads[name] * scale
            lr = lr_schedule(update, total_updates, train_config.warmup_updates, train_config.lr)
            adamw_step(params, grads, state, lr, train_config.weight_decay)
            update += 1
            epoch_loss += batch_loss
        final_loss = epoch_loss / batches_per_epoch

    val_preds = predict(params, config, vocab, subsets["val"], corpus.code_universe, threads=threads)
    test_preds = predict(params, config, vocab, subsets["test"], corpus.code_universe, threads=threads)
    return TrainResult(
        params=params,
        config=config,
        vocab=vocab,
        val=val_preds,
        test=test_preds,
        final_train_loss=final_loss,
        n_updates=update,
    )


def predict(
    params: dict[str, np.ndarray],
    config: ModelConfig,
    vocab: list[str],
    documents: Sequence[Document],
    code_universe: Sequence[str],
    threads: int = 1,
) -> PredictionSet:
    """Score documents with dropout disabled; rows follow document order."""
    config.validate(resolved=True)
    index = {tok: i for i, tok in enumerate(vocab)}
    id_arrays = [vectorize(doc.tokens, index) for doc in documents]

    def score_one(ids: np.ndarray) -> np.ndarray:
        return forward(params, config, ids).probabilities

    rows = ordered_map(score_one, id_arrays, threads)
    n_codes = len(code_universe)
    scores = np.vstack(rows) if rows else np.zeros((0, n_codes))
    return PredictionSet(
        doc_ids=[doc.doc_id for doc in documents],
        code_universe=list(code_universe),
        scores=scores,
        targets=_target_matrix(documents, code_universe),
    )


def _apply_pretrained(params: dict, vocab: list[str], path: str, d_e: int) -> None:
    vectors = load_pretrained_embeddings(path)
    dim = len(next(iter(vectors.values())))
    if dim != d_e:
        raise DataError(f"pretrained embedding dimension {dim} != configured d_e {d_e}")
    for i, token in enumerate(vocab):
        if token in vectors:
            params["emb"][i] = vectors[token]
