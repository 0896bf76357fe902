"""Model persistence: a .npz tensor container plus a JSON shape manifest,
and the text format for externally pretrained word vectors."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from icdkit.errors import DataError
from icdkit.models.config import ModelConfig

__all__ = ["load_model", "load_pretrained_embeddings", "save_model"]

FORMAT_VERSION = 1


def save_model(stem: str | Path, params: dict[str, np.ndarray], config: ModelConfig, vocab: list[str]) -> None:
    """Write ``<stem>.npz`` (tensors) and ``<stem>.json`` (versioned manifest)."""
    stem = Path(stem)
    np.savez(stem.with_suffix(".npz"), **params)
    manifest = {
        "format_version": FORMAT_VERSION,
        "model": config.to_json_dict(),
        "vocab": vocab,
        "shapes": {name: list(tensor.shape) for name, tensor in params.items()},
    }
    with stem.with_suffix(".json").open("w", encoding="utf-8", newline="\n") as handle:
        json.dump(manifest, handle, indent=2, sort_keys=True)
        handle.write("\n")


def load_model(stem: str | Path) -> tuple[dict[str, np.ndarray], ModelConfig, list[str]]:
    stem = Path(stem)
    manifest_path = stem.with_suffix(".json")
    tensor_path = stem.with_suffix(".npz")
    if not manifest_path.exists() or not tensor_path.exists():
        raise DataError(f"model files not found at {stem}.npz / {stem}.json")
    with manifest_path.open("r", encoding="utf-8") as handle:
        manifest = json.load(handle)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DataError(f"unsupported model format version {manifest.get('format_version')!r}")
    config = ModelConfig.from_json_dict(manifest["model"])
    with np.load(tensor_path) as data:
        params = {name: data[name] for name in data.files}
    for name, shape in manifest["shapes"].items():
        if name not in params:
            raise DataError(f"tensor {name!r} missing from {tensor_path}")
        if list(params[name].shape) != shape:
            raise DataError(f"tensor {name!r} has shape {params[name].shape}, manifest says {shape}")
    return params, config, list(manifest["vocab"])


def load_pretrained_embeddings(path: str | Path) -> dict[str, np.ndarray]:
    """Text vectors: first line "count dim", then one "token v1 ... vd" per line."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"embedding file not found: {path}")
    with path.open("r", encoding="utf-8") as handle:
        header = handle.readline().split()
        if len(header) != 2:
            raise DataError(f"{path}: first line must be 'count dim'")
        try:
            count, dim = int(header[0]), int(header[1])
        except ValueError as exc:
            raise DataError(f"{path}: first line must be 'count dim'") from exc
        vectors: dict[str, np.ndarray] = {}
        for lineno, line in enumerate(handle, start=2):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != dim + 1:
                raise DataError(f"{path} line {lineno}: expected {dim} components")
            vectors[parts[0]] = np.asarray([float(v) for v in parts[1:]])
    if len(vectors) != count:
        raise DataError(f"{path}: header promised {count} vectors, found {len(vectors)}")
    return vectors
