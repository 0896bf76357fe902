from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))  # makes `oracles` importable

from icdkit.corpus import SyntheticSpec, filter_rare_codes, preprocess, synthesize
from icdkit.metrics import PredictionSet


def random_prediction_set(rng: np.random.Generator, max_docs: int = 200, max_codes: int = 50) -> PredictionSet:
    """A random instance with uncontrolled missing codes and empty documents."""
    n_docs = int(rng.integers(2, max_docs + 1))
    n_codes = int(rng.integers(2, max_codes + 1))
    scores = rng.random((n_docs, n_codes))
    if rng.random() < 0.3:
        # inject score ties so tie-handling paths are exercised
        scores = np.round(scores, 1)
    density = rng.uniform(0.05, 0.5)
    targets = (rng.random((n_docs, n_codes)) < density).astype(int)
    doc_ids = [f"D{i}" for i in range(n_docs)]
    codes = [f"C{j:03d}" for j in range(n_codes)]
    return PredictionSet(doc_ids=doc_ids, code_universe=codes, scores=scores, targets=targets)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    """One visible PASS/FAIL line per acceptance criterion."""
    outcome = yield
    report = outcome.get_result()
    if report.when == "call" and item.fspath.basename == "test_acceptance.py":
        writer = item.config.pluginmanager.get_plugin("terminalreporter")
        if writer is not None:
            status = "PASS" if report.passed else "FAIL"
            summary = (item.function.__doc__ or item.name).strip().splitlines()[0]
            writer.write_line(f"[{status}] {summary}")


@pytest.fixture(scope="session")
def trigger_corpus():
    """Small learnable corpus shared by the model-facing tests."""
    spec = SyntheticSpec(
        n_patients=180,
        docs_per_patient_range=(2, 2),
        n_codes=25,
        zipf_exponent=1.0,
        trigger_tokens_per_code=2,
        noise_token_count_range=(10, 18),
        doc_length_range=(8, 30),
        seed=77,
    )
    return preprocess(filter_rare_codes(synthesize(spec), 8), max_words=4000)
