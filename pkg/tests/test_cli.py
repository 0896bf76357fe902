from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from icdkit.cli import main
from icdkit.corpus import filter_rare_codes, ingest
from icdkit.metrics import (
    MetricPolicy,
    evaluate,
    read_prediction_set,
    validate_report_dict,
)
from icdkit.splits import read_split_csv, stratified_split
from icdkit.tuning import tune


SYNTH_SPEC = {
    "n_patients": 120,
    "docs_per_patient_range": [2, 2],
    "n_codes": 15,
    "zipf_exponent": 1.0,
    "trigger_tokens_per_code": 2,
    "noise_token_count_range": [8, 14],
    "doc_length_range": [6, 24],
    "seed": 4242,
}


def write_code_system_csv(path: Path, n_codes: int) -> None:
    rows = ["code,description,chapter_id,chapter_label,category,kind,version"]
    for i in range(n_codes):
        chapter = "I" if i % 2 == 0 else "II"
        rows.append(f"C{i:04d},desc {i},{chapter},Chapter {chapter},cat{i % 3},diagnosis,ICD-10")
    path.write_text("\n".join(rows) + "\n", encoding="utf-8")


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Synth corpus + config + split + trained model, shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    spec_path = root / "synth.json"
    spec_path.write_text(json.dumps(SYNTH_SPEC), encoding="utf-8")
    corpus_path = root / "corpus.jsonl"
    assert main(["synth", "--spec", str(spec_path), "--out", str(corpus_path)]) == 0

    write_code_system_csv(root / "codes.csv", SYNTH_SPEC["n_codes"])
    config = {
        "paths": {
            "corpus": str(corpus_path),
            "code_system": str(root / "codes.csv"),
            "output_dir": str(root / "out"),
        },
        "preprocessing": {"max_words": 4000},
        "split": {"ratios": [0.7286, 0.1057, 0.1657], "min_code_count": 8, "seed": 7},
        "model": {"encoder": "conv", "decoder": "la_caml", "d_e": 8, "d_h": 16, "window": 3, "d_p": 8},
        "training": {
            "lr": 0.005, "weight_decay": 0.0001, "dropout": 0.2, "batch_size": 8,
            "epochs": 3, "warmup_updates": 10, "seed": 1, "boundary_tuning": True,
        },
        "evaluation": {"boundary": 0.5, "macro_formula": "arithmetic", "missing_class": "ignore", "ks": [3, 5]},
        "analysis": {"min_words": 5, "max_words": 40},
    }
    config_path = root / "exp.json"
    config_path.write_text(json.dumps(config, indent=2), encoding="utf-8")

    assert main(["split", "--config", str(config_path)]) == 0
    assert main(["train", "--config", str(config_path)]) == 0
    return root


def file_hashes(directory: Path, skip=("manifest.json",)) -> dict[str, str]:
    return {
        p.name: hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(directory.iterdir())
        if p.is_file() and p.name not in skip
    }


class TestSynthAndStats:
    def test_synth_deterministic(self, workdir, tmp_path):
        spec_path = workdir / "synth.json"
        out = tmp_path / "again.jsonl"
        assert main(["synth", "--spec", str(spec_path), "--out", str(out)]) == 0
        assert out.read_bytes() == (workdir / "corpus.jsonl").read_bytes()

    def test_stats_prints_json(self, workdir, capsys):
        assert main(["stats", "--corpus", str(workdir / "corpus.jsonl")]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["n_documents"] == 240
        assert payload["n_patients"] == 120

    def test_synth_spec_override(self, workdir, tmp_path, capsys):
        out = tmp_path / "small.jsonl"
        assert main(["synth", "--spec", str(workdir / "synth.json"), "--out", str(out), "--n_patients=10"]) == 0
        capsys.readouterr()
        assert main(["stats", "--corpus", str(out)]) == 0
        assert json.loads(capsys.readouterr().out)["n_patients"] == 10


class TestSplitCommand:
    def test_outputs_exist_and_audit_clean(self, workdir):
        out = workdir / "out"
        audit = json.loads((out / "audit.json").read_text())
        assert all(v == 0 for v in audit["patient_overlap"].values())
        assert set(audit["missing_codes"]) == {"train", "val", "test"}
        split = read_split_csv(out / "split.csv")
        assert len(split.assignment) == 240

    def test_rerun_is_byte_identical(self, workdir):
        out = workdir / "out"
        before = file_hashes(out)
        assert main(["split", "--config", str(workdir / "exp.json")]) == 0
        assert file_hashes(out) == before

    def test_matches_library_calls(self, workdir):
        corpus = filter_rare_codes(ingest(workdir / "corpus.jsonl"), 8)
        split = stratified_split(corpus, (0.7286, 0.1057, 0.1657), seed=7)
        from_file = read_split_csv(workdir / "out" / "split.csv")
        assert from_file.assignment == split.assignment


class TestTrainCommand:
    def test_outputs(self, workdir):
        out = workdir / "out"
        for name in ("model.npz", "model.json", "val_predictions.jsonl", "test_predictions.jsonl", "manifest.json"):
            assert (out / name).exists(), name
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config_hash"]
        assert manifest["wall_clock_sec"] >= 0

    def test_missing_split_is_data_error(self, workdir, tmp_path):
        config = json.loads((workdir / "exp.json").read_text())
        config["paths"]["output_dir"] = str(tmp_path / "fresh")
        path = tmp_path / "exp.json"
        path.write_text(json.dumps(config), encoding="utf-8")
        assert main(["train", "--config", str(path)]) == 3

    def test_three_seeds_three_distinct_prediction_sets(self, workdir, tmp_path):
        runs = [read_prediction_set(workdir / "out" / "val_predictions.jsonl")]  # seed 1
        for seed in (2, 3):
            out_dir = tmp_path / f"out_seed{seed}"
            config = json.loads((workdir / "exp.json").read_text())
            config["paths"]["output_dir"] = str(out_dir)
            path = tmp_path / f"exp_seed{seed}.json"
            path.write_text(json.dumps(config), encoding="utf-8")
            out_dir.mkdir()
            (out_dir / "split.csv").write_bytes((workdir / "out" / "split.csv").read_bytes())
            assert main(["train", "--config", str(path), f"--training.seed={seed}"]) == 0
            runs.append(read_prediction_set(out_dir / "val_predictions.jsonl"))
        for i in range(3):
            for j in range(i + 1, 3):
                assert not np.array_equal(runs[i].scores, runs[j].scores)

    def test_manifest_hash_tracks_config(self, workdir, tmp_path):
        out2 = tmp_path / "out3"
        config = json.loads((workdir / "exp.json").read_text())
        config["paths"]["output_dir"] = str(out2)
        path = tmp_path / "exp.json"
        path.write_text(json.dumps(config), encoding="utf-8")
        out2.mkdir()
        (out2 / "split.csv").write_bytes((workdir / "out" / "split.csv").read_bytes())
        assert main(["train", "--config", str(path)]) == 0
        base = json.loads((out2 / "manifest.json").read_text())["config_hash"]
        assert main(["train", "--config", str(path), "--training.seed=9"]) == 0
        changed = json.loads((out2 / "manifest.json").read_text())["config_hash"]
        assert base != changed


class TestTuneCommand:
    def test_sweep_has_99_rows_and_policy(self, workdir, tmp_path):
        sweep_csv = tmp_path / "sweep.csv"
        policy_json = tmp_path / "policy.json"
        assert main([
            "tune", "--preds", str(workdir / "out" / "val_predictions.jsonl"),
            "--out", str(sweep_csv), "--policy-out", str(policy_json),
        ]) == 0
        rows = sweep_csv.read_text().strip().split("\n")
        assert len(rows) == 100
        policy = MetricPolicy.from_json_dict(json.loads(policy_json.read_text()))
        preds = read_prediction_set(workdir / "out" / "val_predictions.jsonl")
        sweep = tune(preds)
        assert policy.boundary == sweep.best_boundary
        # pilot threshold for the 3-epoch, 240-document fixture (reaches ~0.53)
        assert sweep.best_micro_f1 >= 0.4


class TestEvaluateCommand:
    def test_report_and_markdown(self, workdir, tmp_path):
        report_path = tmp_path / "report.json"
        md_path = tmp_path / "report.md"
        assert main([
            "evaluate", "--preds", str(workdir / "out" / "test_predictions.jsonl"),
            "--out", str(report_path), "--markdown-out", str(md_path), "--k", "3,5",
        ]) == 0
        payload = json.loads(report_path.read_text())
        validate_report_dict(payload)
        assert "precision_at_3" in payload["values"]
        assert md_path.read_text().startswith("| AUC Micro |")

    def test_macro_flag_switches_formula(self, workdir, tmp_path):
        preds_path = workdir / "out" / "test_predictions.jsonl"
        out_a = tmp_path / "a.json"
        out_h = tmp_path / "h.json"
        assert main(["evaluate", "--preds", str(preds_path), "--out", str(out_a), "--k", "3"]) == 0
        assert main(["evaluate", "--preds", str(preds_path), "--out", str(out_h), "--k", "3",
                     "--macro", "harmonic_of_means"]) == 0
        a = json.loads(out_a.read_text())
        h = json.loads(out_h.read_text())
        assert a["policy"]["macro_formula"] == "arithmetic"
        assert h["policy"]["macro_formula"] == "harmonic_of_means"
        preds = read_prediction_set(preds_path)
        want = evaluate(preds, MetricPolicy(macro_formula="harmonic_of_means"), ks=(3,))
        assert h["values"]["f1_macro"] == pytest.approx(want.values["f1_macro"], abs=1e-12)

    def test_legacy_macro_flag_rewards_biased_fixture(self, workdir, tmp_path):
        # the biased two-code fixture from the metrics tests, through the CLI
        from icdkit.metrics import PredictionSet, write_prediction_set

        targets = np.zeros((100, 2), dtype=int)
        targets[:90, 0] = 1
        targets[:10, 1] = 1
        fixture = tmp_path / "biased.jsonl"
        biased = PredictionSet(
            doc_ids=[f"d{i}" for i in range(100)],
            code_universe=["common", "rare"],
            scores=np.full((100, 2), 0.9),
            targets=targets,
        )
        write_prediction_set(biased, fixture)
        out_a, out_h = tmp_path / "ar.json", tmp_path / "hm.json"
        assert main(["evaluate", "--preds", str(fixture), "--out", str(out_a), "--k", "1,2"]) == 0
        assert main(["evaluate", "--preds", str(fixture), "--out", str(out_h), "--k", "1,2",
                     "--macro", "harmonic_of_means"]) == 0
        arithmetic = json.loads(out_a.read_text())["values"]["f1_macro"]
        harmonic = json.loads(out_h.read_text())["values"]["f1_macro"]
        assert harmonic > arithmetic

    def test_boundary_flag(self, workdir, tmp_path):
        out = tmp_path / "b.json"
        assert main(["evaluate", "--preds", str(workdir / "out" / "test_predictions.jsonl"),
                     "--out", str(out), "--k", "3", "--boundary", "0.3"]) == 0
        assert json.loads(out.read_text())["policy"]["boundary"] == 0.3

    def test_policy_conflicts_are_config_errors(self, workdir, tmp_path):
        policy_path = tmp_path / "p.json"
        policy_path.write_text(json.dumps(MetricPolicy().to_json_dict()), encoding="utf-8")
        code = main(["evaluate", "--preds", str(workdir / "out" / "test_predictions.jsonl"),
                     "--out", str(tmp_path / "x.json"), "--policy", str(policy_path), "--boundary", "0.4"])
        assert code == 2

    def test_missing_file_is_data_error(self, tmp_path):
        assert main(["evaluate", "--preds", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path / "r.json")]) == 3


class TestAnalyzeCommands:
    def test_frequency(self, workdir, tmp_path):
        out = tmp_path / "freq.json"
        assert main(["analyze", "frequency", "--config", str(workdir / "exp.json"),
                     "--preds", str(workdir / "out" / "test_predictions.jsonl"), "--out", str(out)]) == 0
        payload = json.loads(out.read_text())
        assert -1.0 <= payload["pearson"] <= 1.0
        assert out.with_suffix(".csv").exists()

    def test_frequency_works_on_tiny_code_universe(self, workdir, tmp_path):
        # per-code analyses must not require the ranked-metric preconditions
        # (here: fewer codes than the default precision@k cutoffs)
        from icdkit.metrics import PredictionSet, write_prediction_set

        corpus = filter_rare_codes(ingest(workdir / "corpus.jsonl"), 8)
        rng = np.random.default_rng(0)
        codes = corpus.code_universe[:4]
        docs = [d.doc_id for d in corpus.documents[:30]]
        tiny = PredictionSet(
            doc_ids=docs,
            code_universe=codes,
            scores=rng.random((30, 4)),
            targets=(rng.random((30, 4)) < 0.4).astype(int),
        )
        preds_path = tmp_path / "tiny.jsonl"
        write_prediction_set(tiny, preds_path)
        out = tmp_path / "freq_tiny.json"
        assert main(["analyze", "frequency", "--config", str(workdir / "exp.json"),
                     "--preds", str(preds_path), "--out", str(out)]) == 0
        assert -1.0 <= json.loads(out.read_text())["pearson"] <= 1.0

    def test_length_band_from_config(self, workdir, tmp_path):
        out = tmp_path / "len.json"
        assert main(["analyze", "length", "--config", str(workdir / "exp.json"),
                     "--preds", str(workdir / "out" / "test_predictions.jsonl"), "--out", str(out)]) == 0
        payload = json.loads(out.read_text())
        assert payload["n"] >= 3
        assert out.with_suffix(".csv").exists()

    def test_never_predicted(self, workdir, tmp_path):
        out = tmp_path / "never.json"
        assert main(["analyze", "never-predicted", "--preds", str(workdir / "out" / "test_predictions.jsonl"),
                     "--boundary", "0.5", "--out", str(out)]) == 0
        payload = json.loads(out.read_text())
        assert 0.0 <= payload["fraction"] <= 1.0

    def test_chapters(self, workdir, tmp_path):
        out = tmp_path / "chapters.json"
        assert main(["analyze", "chapters", "--config", str(workdir / "exp.json"),
                     "--preds", str(workdir / "out" / "test_predictions.jsonl"),
                     "--out", str(out), "--min-occurrences", "5"]) == 0
        payload = json.loads(out.read_text())
        assert payload["chapters"]

    def test_chapters_refuses_without_code_system(self, workdir, tmp_path):
        config = json.loads((workdir / "exp.json").read_text())
        del config["paths"]["code_system"]
        path = tmp_path / "nocs.json"
        path.write_text(json.dumps(config), encoding="utf-8")
        code = main(["analyze", "chapters", "--config", str(path),
                     "--preds", str(workdir / "out" / "test_predictions.jsonl"),
                     "--out", str(tmp_path / "x.json")])
        assert code == 2

    def test_mcnemar_identical_preds(self, workdir, tmp_path):
        preds = str(workdir / "out" / "test_predictions.jsonl")
        out = tmp_path / "mc.json"
        assert main(["analyze", "mcnemar", "--preds-a", preds, "--preds-b", preds,
                     "--boundary", "0.5", "--n-comparisons", "15", "--out", str(out)]) == 0
        payload = json.loads(out.read_text())
        assert payload["raw_p"] == 1.0 and not payload["significant"]

    def test_train_size(self, workdir, tmp_path):
        out = tmp_path / "curve.json"
        assert main(["analyze", "train-size", "--config", str(workdir / "exp.json"),
                     "--sizes", "40,80", "--out", str(out)]) == 0
        payload = json.loads(out.read_text())
        assert [p["size"] for p in payload["curve"]] == [40, 80]
        assert out.with_suffix(".csv").exists()


class TestDeterminism:
    def test_train_rerun_byte_identical_across_threads(self, workdir):
        out = workdir / "out"
        before = file_hashes(out)
        assert main(["train", "--config", str(workdir / "exp.json")]) == 0
        assert file_hashes(out) == before
        assert main(["--threads", "2", "train", "--config", str(workdir / "exp.json")]) == 0
        assert file_hashes(out) == before


class TestErrors:
    def test_bad_config_missing_section(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text(json.dumps({"paths": {"corpus": "x", "output_dir": "y"}}), encoding="utf-8")
        assert main(["split", "--config", str(path)]) == 2

    def test_missing_seed_is_config_error(self, workdir, tmp_path):
        config = json.loads((workdir / "exp.json").read_text())
        del config["training"]["seed"]
        path = tmp_path / "noseed.json"
        path.write_text(json.dumps(config), encoding="utf-8")
        assert main(["train", "--config", str(path)]) == 2

    def test_missing_corpus_is_data_error(self, workdir, tmp_path):
        config = json.loads((workdir / "exp.json").read_text())
        config["paths"]["corpus"] = str(tmp_path / "ghost.jsonl")
        path = tmp_path / "ghost.json"
        path.write_text(json.dumps(config), encoding="utf-8")
        assert main(["split", "--config", str(path)]) == 3
