"""Batch command-line front end: synth -> split -> train -> tune -> evaluate -> analyze.

Every command is driven by a JSON experiment config (plus dotted-path
overrides such as ``--training.seed=7``) and is deterministic given that
config: all randomness is seeded explicitly, commands compose through
files only, and rerunning a command reproduces its data outputs byte for
byte. Exit codes: 0 success, 2 config error, 3 data error, 4 numeric
failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from pathlib import Path

from icdkit import analysis as analysis_mod
from icdkit import corpus as corpus_mod
from icdkit import splits as splits_mod
from icdkit import tuning as tuning_mod
from icdkit.errors import ConfigError, DataError, NumericError
from icdkit.metrics import (
    MetricPolicy,
    evaluate,
    per_code_report,
    read_prediction_set,
    report_to_markdown,
    write_prediction_set,
)
from icdkit.models import ModelConfig, TrainConfig, save_model, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _write_json(path: Path, obj: dict) -> None:
    with path.open("w", encoding="utf-8", newline="\n") as handle:
        json.dump(obj, handle, indent=2, sort_keys=True)
        handle.write("\n")


def _read_json(path: Path) -> dict:
    if not path.exists():
        raise DataError(f"file not found: {path}")
    try:
        with path.open("r", encoding="utf-8") as handle:
            return json.load(handle)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: malformed JSON ({exc.msg})") from exc


def config_hash(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def apply_overrides(config: dict, overrides: list[str]) -> dict:
    """Apply ``--a.b.c=value`` style overrides; values parse as JSON, else strings."""
    for item in overrides:
        if not item.startswith("--") or "=" not in item:
            raise ConfigError(f"unrecognized argument {item!r} (expected --path.to.key=value)")
        dotted, _, raw = item[2:].partition("=")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = config
        keys = dotted.split(".")
        for key in keys[:-1]:
            if not isinstance(node.get(key), dict):
                node[key] = {}
            node = node[key]
        node[keys[-1]] = value
    return config


REQUIRED_SECTIONS = ("paths", "preprocessing", "split", "model", "training", "evaluation")


def load_experiment_config(path: str, overrides: list[str]) -> dict:
    config = _read_json(Path(path))
    apply_overrides(config, overrides)
    for section in REQUIRED_SECTIONS:
        if section not in config:
            raise ConfigError(f"config missing section {section!r}")
    if "seed" not in config["split"]:
        raise ConfigError("split config must set an explicit seed")
    if "seed" not in config["training"]:
        raise ConfigError("training config must set an explicit seed")
    if "corpus" not in config["paths"] or "output_dir" not in config["paths"]:
        raise ConfigError("paths config must set corpus and output_dir")
    return config


def _output_dir(config: dict) -> Path:
    out = Path(config["paths"]["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _prepared_corpus(config: dict, preprocess: bool) -> corpus_mod.Corpus:
    data = corpus_mod.ingest(config["paths"]["corpus"])
    if preprocess:
        data = corpus_mod.preprocess(data, int(config["preprocessing"]["max_words"]))
    min_count = int(config["split"].get("min_code_count", 1))
    if min_count > 1:
        data = corpus_mod.filter_rare_codes(data, min_count)
    return data


def _policy_from_config(config: dict) -> MetricPolicy:
    section = config.get("evaluation", {})
    return MetricPolicy(
        boundary=float(section.get("boundary", 0.5)),
        macro_formula=section.get("macro_formula", "arithmetic"),
        missing_class=section.get("missing_class", "ignore"),
    )


def cmd_synth(args: argparse.Namespace, overrides: list[str]) -> int:
    spec_dict = apply_overrides(_read_json(Path(args.spec)), overrides)
    spec = corpus_mod.SyntheticSpec.from_json_dict(spec_dict)
    generated = corpus_mod.synthesize(spec)
    corpus_mod.emit(generated, args.out)
    print(f"wrote {len(generated.documents)} documents, {len(generated.code_universe)} codes -> {args.out}")
    return EXIT_OK


def cmd_stats(args: argparse.Namespace, overrides: list[str]) -> int:
    del overrides
    data = corpus_mod.ingest(args.corpus)
    tokenized = args.max_words is not None
    if tokenized:
        data = corpus_mod.preprocess(data, args.max_words)
    report = corpus_mod.stats(data, tokenized=tokenized)
    print(json.dumps(report.to_json_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_split(args: argparse.Namespace, overrides: list[str]) -> int:
    config = load_experiment_config(args.config, overrides)
    out = _output_dir(config)
    data = _prepared_corpus(config, preprocess=False)
    ratios = tuple(config["split"].get("ratios", splits_mod.DEFAULT_RATIOS))
    assignment = splits_mod.stratified_split(data, ratios, int(config["split"]["seed"]))
    report = splits_mod.audit(data, assignment)
    splits_mod.write_split_csv(assignment, out / "split.csv")
    splits_mod.write_audit_json(report, out / "audit.json")

    summary = corpus_mod.stats(data)
    print(f"documents            {summary.n_documents}")
    print(f"patients             {summary.n_patients}")
    print(f"unique codes         {summary.n_unique_codes}")
    med, q1, q3 = summary.codes_per_instance_median_iqr
    print(f"codes / instance     {med:.0f} ({q1:.0f}-{q3:.0f})")
    med, q1, q3 = summary.words_per_document_median_iqr
    print(f"words / document     {med:.0f} ({q1:.0f}-{q3:.0f})")
    docs_pct = "/".join(f"{100 * report.fractions[s]:.1f}" for s in splits_mod.SUBSET_NAMES)
    miss_pct = "/".join(f"{100 * report.missing_codes[s]:.1f}" for s in splits_mod.SUBSET_NAMES)
    overlap = "/".join(str(v) for v in report.patient_overlap.values())
    print(f"documents t/v/t [%]  {docs_pct}")
    print(f"missing codes [%]    {miss_pct}")
    print(f"patient overlap      {overlap}")
    for warning in report.warnings:
        print(f"warning: {warning}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace, overrides: list[str]) -> int:
    config = load_experiment_config(args.config, overrides)
    out = _output_dir(config)
    started = time.monotonic()
    data = _prepared_corpus(config, preprocess=True)
    split_path = out / "split.csv"
    if not split_path.exists():
        raise DataError(f"split file {split_path} not found; run the split command first")
    assignment = splits_mod.read_split_csv(split_path)

    training = dict(config["training"])
    training.setdefault("max_words", int(config["preprocessing"]["max_words"]))
    train_config = TrainConfig.from_json_dict(training)
    model_config = ModelConfig.from_json_dict(dict(config["model"]))

    result = train(data, assignment, model_config, train_config, threads=args.threads)
    save_model(out / "model", result.params, result.config, result.vocab)
    write_prediction_set(result.val, out / "val_predictions.jsonl")
    write_prediction_set(result.test, out / "test_predictions.jsonl")
    _write_json(
        out / "manifest.json",
        {
            "config_hash": config_hash(config),
            "wall_clock_sec": round(time.monotonic() - started, 3),
            "n_updates": result.n_updates,
            "final_train_loss": result.final_train_loss,
        },
    )
    print(f"trained {result.config.encoder}+{result.config.decoder}: "
          f"{result.n_updates} updates, final loss {result.final_train_loss:.4f}")
    return EXIT_OK


def cmd_tune(args: argparse.Namespace, overrides: list[str]) -> int:
    del overrides
    preds = read_prediction_set(args.preds)
    sweep = tuning_mod.tune(preds, args.grid_step)
    tuning_mod.write_sweep_csv(sweep, args.out)
    if args.policy_out:
        policy = MetricPolicy(boundary=sweep.best_boundary)
        _write_json(Path(args.policy_out), policy.to_json_dict())
    print(f"best boundary {sweep.best_boundary:.4f} with micro F1 {sweep.best_micro_f1:.4f}")
    return EXIT_OK


def _parse_ks(raw: str) -> tuple[int, ...]:
    try:
        ks = tuple(int(part) for part in raw.split(",") if part)
    except ValueError as exc:
        raise ConfigError(f"--k must be comma-separated integers, got {raw!r}") from exc
    if not ks:
        raise ConfigError("--k must list at least one cutoff")
    return ks


def cmd_evaluate(args: argparse.Namespace, overrides: list[str]) -> int:
    del overrides
    preds = read_prediction_set(args.preds)
    if args.policy:
        policy = MetricPolicy.from_json_dict(_read_json(Path(args.policy)))
        if args.boundary is not None or args.macro or args.missing:
            raise ConfigError("--policy cannot be combined with --boundary/--macro/--missing")
    else:
        policy = MetricPolicy(
            boundary=args.boundary if args.boundary is not None else 0.5,
            macro_formula=args.macro or "arithmetic",
            missing_class=args.missing or "ignore",
        )
    report = evaluate(preds, policy, ks=_parse_ks(args.k))
    _write_json(Path(args.out), report.to_json_dict())
    if args.markdown_out:
        Path(args.markdown_out).write_text(report_to_markdown(report), encoding="utf-8")
    shown = {k: round(v, 4) for k, v in sorted(report.values.items())}
    print(json.dumps(shown, indent=2, sort_keys=True))
    return EXIT_OK


def _train_counts(config: dict, out: Path) -> dict[str, int]:
    """Training-subset document frequency per code, recomputed from files."""
    data = _prepared_corpus(config, preprocess=False)
    assignment = splits_mod.read_split_csv(out / "split.csv")
    counts: dict[str, int] = {}
    for doc in data.documents:
        if assignment.assignment.get(doc.doc_id) == "train":
            for code in doc.codes:
                counts[code] = counts.get(code, 0) + 1
    return counts


def _word_counts(config: dict) -> dict[str, int]:
    """Untruncated preprocessed token count per document."""
    data = corpus_mod.ingest(config["paths"]["corpus"])
    return {doc.doc_id: len(corpus_mod.tokenize_text(doc.raw_text)) for doc in data.documents}


def _write_csv(path: Path, fieldnames: list[str], rows: list[dict]) -> None:
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=fieldnames, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def cmd_analyze(args: argparse.Namespace, overrides: list[str]) -> int:
    which = args.analysis
    out_path = Path(args.out)

    if which == "mcnemar":
        result = analysis_mod.mcnemar_bonferroni(
            read_prediction_set(args.preds_a),
            read_prediction_set(args.preds_b),
            boundary=args.boundary,
            n_comparisons=args.n_comparisons,
            unit=args.unit,
        )
        _write_json(out_path, result.to_json_dict())
        print(json.dumps(result.to_json_dict(), indent=2, sort_keys=True))
        return EXIT_OK

    if which == "never-predicted":
        result = analysis_mod.never_predicted_fraction(read_prediction_set(args.preds), args.boundary)
        _write_json(out_path, result.to_json_dict())
        print(f"never predicted: {result.fraction:.4f} ({len(result.codes)}/{result.n_eligible} codes)")
        return EXIT_OK

    config = load_experiment_config(args.config, overrides)
    out_dir = _output_dir(config)
    policy = _policy_from_config(config)
    if getattr(args, "boundary", None) is not None:
        policy = MetricPolicy(
            boundary=args.boundary, macro_formula=policy.macro_formula, missing_class=policy.missing_class
        )

    if which == "frequency":
        preds = read_prediction_set(args.preds)
        report = per_code_report(preds, policy)
        counts = _train_counts(config, out_dir)
        result = analysis_mod.code_frequency_correlation(report, counts)
        _write_json(out_path, result.to_json_dict())
        bins = analysis_mod.frequency_bins(report, counts)
        _write_csv(
            out_path.with_suffix(".csv"),
            ["log_count_low", "log_count_high", "mean_f1", "std_f1", "n_codes"],
            bins,
        )
        print(f"pearson {result.pearson:.4f}  spearman {result.spearman:.4f}  (n={result.n})")
        return EXIT_OK

    if which == "length":
        preds = read_prediction_set(args.preds)
        counts = _word_counts(config)
        section = config.get("analysis", {})
        min_words = args.min_words if args.min_words is not None else int(section.get("min_words", 1000))
        max_words = args.max_words if args.max_words is not None else int(section.get("max_words", 4000))
        result = analysis_mod.doc_length_correlation(
            preds, policy.boundary, counts, min_words=min_words, max_words=max_words
        )
        _write_json(out_path, result.to_json_dict())
        bins = analysis_mod.length_bins(preds, policy.boundary, counts)
        _write_csv(out_path.with_suffix(".csv"), ["words_low", "words_high", "mean_f1", "n_docs"], bins)
        print(f"pearson {result.pearson:.4f}  spearman {result.spearman:.4f}  (n={result.n})")
        return EXIT_OK

    if which == "chapters":
        if not config["paths"].get("code_system"):
            raise ConfigError("chapter analysis requires paths.code_system in the config")
        code_system = corpus_mod.load_code_system(config["paths"]["code_system"])
        preds = read_prediction_set(args.preds)
        report = per_code_report(preds, policy)
        counts = _train_counts(config, out_dir)
        result = analysis_mod.chapter_report(report, code_system, counts, min_occurrences=args.min_occurrences)
        _write_json(out_path, result.to_json_dict())
        print(f"{len(result.chapters)} chapters over {result.n_codes_included} codes")
        return EXIT_OK

    if which == "train-size":
        sizes = [int(s) for s in args.sizes.split(",") if s]
        data = _prepared_corpus(config, preprocess=True)
        assignment = splits_mod.read_split_csv(out_dir / "split.csv")
        training = dict(config["training"])
        training.setdefault("max_words", int(config["preprocessing"]["max_words"]))
        curve = analysis_mod.training_size_curve(
            data,
            assignment,
            sizes,
            ModelConfig.from_json_dict(dict(config["model"])),
            TrainConfig.from_json_dict(training),
            policy=policy,
            threads=args.threads,
        )
        _write_json(out_path, {"curve": curve})
        _write_csv(
            out_path.with_suffix(".csv"),
            ["size", "boundary", "micro_f1", "macro_f1", "n_patients_split"],
            curve,
        )
        for point in curve:
            print(f"size {point['size']}: micro {point['micro_f1']:.4f}  macro {point['macro_f1']:.4f}")
        return EXIT_OK

    raise ConfigError(f"unknown analysis {which!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="icdkit",
        description="Corpus, split, train, tune, evaluate, and analyze multi-label code prediction experiments.",
    )
    parser.add_argument("--threads", type=int, default=1, help="worker threads (results are bit-identical at any count)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="emit a synthetic corpus from a JSON generator spec")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("stats", help="print corpus summary statistics")
    p.add_argument("--corpus", required=True)
    p.add_argument("--max-words", type=int, default=None, help="preprocess first, then count tokens")

    p = sub.add_parser("split", help="filter rare codes, stratify, audit")
    p.add_argument("--config", required=True)

    p = sub.add_parser("train", help="train a model on an existing split")
    p.add_argument("--config", required=True)

    p = sub.add_parser("tune", help="sweep decision boundaries on a prediction set")
    p.add_argument("--preds", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--grid-step", type=float, default=0.01)
    p.add_argument("--policy-out", default=None)

    p = sub.add_parser("evaluate", help="run the metric battery over a prediction set")
    p.add_argument("--preds", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--markdown-out", default=None)
    p.add_argument("--policy", default=None, help="policy JSON produced by tune")
    p.add_argument("--boundary", type=float, default=None)
    p.add_argument("--macro", choices=["arithmetic", "harmonic_of_means"], default=None)
    p.add_argument("--missing", choices=["ignore", "zero_fill"], default=None)
    p.add_argument("--k", default="8,15", help="comma-separated precision@k cutoffs")

    pa = sub.add_parser("analyze", help="error analyses")
    asub = pa.add_subparsers(dest="analysis", required=True)

    p = asub.add_parser("frequency", help="per-code F1 vs log training frequency")
    p.add_argument("--config", required=True)
    p.add_argument("--preds", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--boundary", type=float, default=None)

    p = asub.add_parser("length", help="per-document F1 vs word count")
    p.add_argument("--config", required=True)
    p.add_argument("--preds", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--boundary", type=float, default=None)
    p.add_argument("--min-words", type=int, default=None)
    p.add_argument("--max-words", type=int, default=None)

    p = asub.add_parser("never-predicted", help="codes with test positives but zero true positives")
    p.add_argument("--preds", required=True)
    p.add_argument("--boundary", type=float, required=True)
    p.add_argument("--out", required=True)

    p = asub.add_parser("chapters", help="chapter-level diagnosis-code report")
    p.add_argument("--config", required=True)
    p.add_argument("--preds", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--boundary", type=float, default=None)
    p.add_argument("--min-occurrences", type=int, default=100)

    p = asub.add_parser("mcnemar", help="paired McNemar test with Bonferroni correction")
    p.add_argument("--preds-a", required=True)
    p.add_argument("--preds-b", required=True)
    p.add_argument("--boundary", type=float, required=True)
    p.add_argument("--n-comparisons", type=int, default=1)
    p.add_argument("--unit", choices=["cells", "documents"], default="cells")
    p.add_argument("--out", required=True)

    p = asub.add_parser("train-size", help="retrain on nested stratified subsets")
    p.add_argument("--config", required=True)
    p.add_argument("--sizes", required=True, help="comma-separated ascending sizes")
    p.add_argument("--out", required=True)

    return parser


COMMANDS = {
    "synth": cmd_synth,
    "stats": cmd_stats,
    "split": cmd_split,
    "train": cmd_train,
    "tune": cmd_tune,
    "evaluate": cmd_evaluate,
    "analyze": cmd_analyze,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extras = parser.parse_known_args(argv)
    try:
        return COMMANDS[args.command](args, extras)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
