"""Glue between the stages: query/gallery splits, embedding manifests, baselines."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .dataset import DIMENSIONS, SCHEMA, DatasetManifest
from .evaluation import EmbeddingSet, EvalReport, evaluate
from .model import EmbeddingModel, embed, preprocess
from .render import render_image
from .style import DEFAULT_K, AttributeSelection


def derive_seed(seed: int, stream: str) -> int:
    """Independent 63-bit seed for a named stage, derived from one run seed."""
    tag = int.from_bytes(stream.encode("utf-8"), "little")
    return int(np.random.SeedSequence([seed, tag]).generate_state(1, np.uint64)[0] >> np.uint64(1))


def query_gallery_split(manifest: DatasetManifest, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """One seeded query per (identity, camera); every other record goes to the gallery."""
    rng = np.random.default_rng([seed, 0x0E7A])
    ident, cam = manifest.identity, manifest.camera
    queries = []
    for key in sorted(set(zip(ident.tolist(), cam.tolist()))):
        members = np.flatnonzero((ident == key[0]) & (cam == key[1]))
        queries.append(int(members[rng.integers(len(members))]))
    queries = np.array(queries, dtype=np.int64)
    gallery = np.setdiff1d(np.arange(len(manifest)), queries)
    return queries, gallery


def manifest_tensors(manifest: DatasetManifest, positions, height: int, width: int) -> np.ndarray:
    """Eval-mode preprocessed tensors (N, 3, height, width) for ``manifest[positions]``."""
    gen = manifest.generator_config
    out = np.empty((len(positions), 3, height, width))
    for n, i in enumerate(positions):
        out[n] = preprocess(render_image(manifest.record(int(i)), gen), height, width)
    return out


def embedding_set(model: EmbeddingModel, manifest: DatasetManifest, positions) -> EmbeddingSet:
    positions = np.asarray(positions, dtype=np.int64)
    cfg = model.config
    x = manifest_tensors(manifest, positions, cfg.input_height, cfg.input_width)
    return EmbeddingSet(embed(model, x), manifest.identity[positions], manifest.camera[positions])


def evaluate_model(model: EmbeddingModel, manifest: DatasetManifest, seed: int) -> EvalReport:
    queries, gallery = query_gallery_split(manifest, seed)
    return evaluate(embedding_set(model, manifest, queries), embedding_set(model, manifest, gallery))


def random_selection(k: Mapping[str, int] | None = None, seed: int = 0) -> AttributeSelection:
    """Baseline: k values per dimension drawn uniformly at random (schema order kept)."""
    k = dict(DEFAULT_K if k is None else k)
    rng = np.random.default_rng([seed, 0xBA5E])
    values = {}
    for dim in DIMENSIONS:
        if dim in k:
            picked = np.sort(rng.choice(SCHEMA.cardinality(dim), size=k[dim], replace=False))
            values[dim] = tuple(SCHEMA.values(dim)[i] for i in picked)
    return AttributeSelection(values, {d: k[d] for d in values})
