"""Gram-matrix style losses per attribute value, with top-k selection of the closest values."""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .dataset import DIMENSIONS, SCHEMA, DatasetManifest, GeneratorConfig, ImageRecord, slice_manifest
from .errors import BadK, EmptySlice, FormatError, ShapeMismatch
from .features import Extractor, FeatureMaps, extract_batch
from .render import render_image

DEFAULT_SAMPLE_CAP = 256
DEFAULT_K = {"background": 3, "weather": 2, "illumination": 4, "viewpoint": 6}

# images per extraction batch; fixed so results do not depend on worker count
CHUNK = 64


def _symmetrize(g: np.ndarray) -> np.ndarray:
    return np.triu(g) + np.swapaxes(np.triu(g, 1), -1, -2)


def gram(feature_map: np.ndarray) -> np.ndarray:
    """G_ij = sum_k F_ik F_jk for an (N, M) activation matrix. Unnormalised."""
    f = np.asarray(feature_map, dtype=np.float64)
    if f.ndim != 2:
        raise ShapeMismatch(f"feature map must be 2-D (N, M), got shape {f.shape}")
    return _symmetrize(f @ f.T)


def batch_gram(feature_maps: np.ndarray) -> np.ndarray:
    """Grams of a (B, N, M) stack."""
    f = np.asarray(feature_maps, dtype=np.float64)
    return _symmetrize(np.matmul(f, np.swapaxes(f, 1, 2)))


def layer_loss(g: np.ndarray, a: np.ndarray, n: int, m: int) -> float:
    """E_l = sum_ij (G_ij - A_ij)^2 / (4 N^2 M^2)."""
    g = np.asarray(g, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if g.shape != a.shape or g.ndim != 2 or g.shape[0] != g.shape[1]:
        raise ShapeMismatch(f"Gram shapes {g.shape} and {a.shape} differ or are not square")
    if g.shape[0] != n:
        raise ShapeMismatch(f"Gram is {g.shape[0]}x{g.shape[0]} but N={n}")
    if n < 1 or m < 1:
        raise ShapeMismatch(f"N and M must be >= 1, got N={n}, M={m}")
    return float(np.sum((g - a) ** 2) / (4.0 * n * n * m * m))


@dataclass(frozen=True)
class StyleWeights:
    values: tuple[float, ...] = (0.2,) * 5

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(w) for w in self.values))
        if any(w < 0 or not np.isfinite(w) for w in self.values):
            raise ValueError("style weights must be finite and >= 0")

    def __len__(self) -> int:
        return len(self.values)

    def __iter__(self):
        return iter(self.values)


def _weights(w, taps: int) -> tuple[float, ...]:
    values = tuple(StyleWeights() if w is None else (w if isinstance(w, StyleWeights) else StyleWeights(w)))
    if len(values) != taps:
        raise ShapeMismatch(f"{len(values)} style weights for {taps} tapped layers")
    return values


def style_loss(features_a: FeatureMaps, features_x: FeatureMaps, w=None) -> float:
    """Weighted sum of per-layer Gram losses between two images' features."""
    if len(features_a) != len(features_x):
        raise ShapeMismatch(f"{len(features_a)} vs {len(features_x)} tapped layers")
    weights = _weights(w, len(features_a))
    total = 0.0
    for wl, fa, fx in zip(weights, features_a.maps, features_x.maps):
        if fa.shape != fx.shape:
            raise ShapeMismatch(f"layer shapes {fa.shape} and {fx.shape} differ")
        n, m = fa.shape
        total += wl * layer_loss(gram(fa), gram(fx), n, m)
    return total


def sample_indices(n: int, cap: int, seed_key: Sequence[int]) -> np.ndarray:
    """Up to ``cap`` positions out of ``n``, uniformly without replacement, sorted."""
    if n <= cap:
        return np.arange(n)
    rng = np.random.default_rng(list(seed_key))
    return np.sort(rng.choice(n, size=cap, replace=False))


def _chunk_gram_sums(extractor: Extractor, config: GeneratorConfig, records: list[ImageRecord]):
    images = [render_image(r, config) for r in records]
    return [batch_gram(f).sum(axis=0) for f in extract_batch(extractor, images)]


def mean_grams(extractor: Extractor, manifest: DatasetManifest, positions: np.ndarray,
               workers: int = 1) -> list[np.ndarray]:
    """Mean Gram per tapped layer over ``manifest[positions]``.

    Chunks of :data:`CHUNK` images are reduced in index order, so the result
    is identical for any worker count.
    """
    if len(positions) == 0:
        raise EmptySlice("cannot average Grams over an empty slice")
    chunks = [[manifest.record(int(i)) for i in positions[s:s + CHUNK]]
              for s in range(0, len(positions), CHUNK)]
    config = manifest.generator_config
    if workers > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_chunk_gram_sums, [extractor] * len(chunks),
                                  [config] * len(chunks), chunks))
    else:
        parts = [_chunk_gram_sums(extractor, config, c) for c in chunks]
    totals = [np.array(p) for p in parts[0]]
    for part in parts[1:]:
        for t, p in zip(totals, part):
            t += p
    return [t / len(positions) for t in totals]


def slice_mean_gram(extractor: Extractor, manifest: DatasetManifest, layer: int,
                    sample_cap: int = DEFAULT_SAMPLE_CAP, seed: int = 0, workers: int = 1) -> np.ndarray:
    """Mean Gram of tapped ``layer`` over a seeded sample of the manifest."""
    taps = extractor.config.tap_indices
    if layer not in taps:
        raise ShapeMismatch(f"layer {layer} is not tapped (taps {taps})")
    positions = sample_indices(len(manifest), sample_cap, (seed,))
    return mean_grams(extractor, manifest, positions, workers)[taps.index(layer)]


@dataclass(frozen=True)
class LossEntry:
    value: object
    loss: float | None  # None when the slice had no records
    samples: int

    @property
    def present(self) -> bool:
        return self.loss is not None


@dataclass(frozen=True)
class LossTable:
    entries: Mapping[str, tuple[LossEntry, ...]]

    def dimensions(self) -> tuple[str, ...]:
        return tuple(d for d in DIMENSIONS if d in self.entries)

    def losses(self, dimension: str) -> dict:
        return {e.value: e.loss for e in self.entries[dimension]}

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["dimension", "value", "loss", "samples"])
        for dim in self.dimensions():
            for e in self.entries[dim]:
                writer.writerow([dim, e.value, "" if e.loss is None else repr(e.loss), e.samples])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "LossTable":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0] != ["dimension", "value", "loss", "samples"]:
            raise FormatError("line 1: missing header 'dimension,value,loss,samples'")
        entries: dict[str, list[LossEntry]] = {}
        for lineno, row in enumerate(rows[1:], start=2):
            if not row:
                continue
            if len(row) != 4:
                raise FormatError(f"line {lineno}: expected 4 fields, got {len(row)}")
            dim, value, loss, samples = row
            if dim not in DIMENSIONS:
                raise FormatError(f"line {lineno}: field 'dimension': unknown {dim!r}")
            try:
                value = SCHEMA.values(dim)[SCHEMA.index(dim, value)]
            except ValueError:
                raise FormatError(f"line {lineno}: field 'value': unknown label {value!r}") from None
            try:
                loss_v = None if loss == "" else float(loss)
                samples_v = int(samples)
            except ValueError:
                raise FormatError(f"line {lineno}: field 'loss'/'samples' is not numeric") from None
            entries.setdefault(dim, []).append(LossEntry(value, loss_v, samples_v))
        return cls({d: tuple(entries[d]) for d in DIMENSIONS if d in entries})


def attribute_loss_table(extractor: Extractor, source: DatasetManifest, target: DatasetManifest,
                         w=None, sample_cap: int = DEFAULT_SAMPLE_CAP, seed: int = 0,
                         workers: int = 1, dimensions: Sequence[str] = DIMENSIONS) -> LossTable:
    """Style loss between every single-value source slice and the whole target."""
    weights = _weights(w, len(extractor.config.tap_indices))
    shapes = extractor.config.tap_shapes()
    target_pos = sample_indices(len(target), sample_cap, (seed, len(DIMENSIONS)))
    target_grams = mean_grams(extractor, target, target_pos, workers)
    entries = {}
    for d_index, dim in enumerate(DIMENSIONS):
        if dim not in dimensions:
            continue
        column = source.column(dim)
        row = []
        for v_index, value in enumerate(SCHEMA.values(dim)):
            members = np.flatnonzero(column == v_index)
            if len(members) == 0:
                row.append(LossEntry(value, None, 0))
                continue
            picked = members[sample_indices(len(members), sample_cap, (seed, d_index, v_index))]
            grams = mean_grams(extractor, source, picked, workers)
            loss = sum(wl * layer_loss(g, a, n, m)
                       for wl, g, a, (n, m) in zip(weights, grams, target_grams, shapes))
            row.append(LossEntry(value, float(loss), len(picked)))
        entries[dim] = tuple(row)
    return LossTable(entries)


@dataclass(frozen=True)
class AttributeSelection:
    values: Mapping[str, tuple]  # per dimension, ascending loss
    k: Mapping[str, int] = field(default_factory=dict)
    table: LossTable | None = None

    def to_json(self) -> str:
        data = {
            "k": {d: self.k[d] for d in DIMENSIONS if d in self.k},
            "values": {d: list(self.values[d]) for d in DIMENSIONS if d in self.values},
            "loss_table": None if self.table is None else self.table.to_csv(),
        }
        return json.dumps(data, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "AttributeSelection":
        try:
            data = json.loads(text)
            values = {d: tuple(SCHEMA.values(d)[SCHEMA.index(d, v)] for v in vs)
                      for d, vs in data["values"].items()}
            k = {d: int(n) for d, n in data.get("k", {}).items()}
        except (ValueError, KeyError, TypeError, AttributeError) as err:
            raise FormatError(f"bad selection file: {err}") from None
        table = LossTable.from_csv(data["loss_table"]) if data.get("loss_table") else None
        return cls(values, k, table)


def select_attributes(table: LossTable, k: Mapping[str, int] | None = None) -> AttributeSelection:
    """The k smallest-loss values per dimension; ties go to the earlier schema value."""
    k = dict(DEFAULT_K if k is None else k)
    chosen = {}
    for dim in table.dimensions():
        if dim not in k:
            continue
        kd = k[dim]
        present = [(e.loss, SCHEMA.index(dim, e.value), e.value)
                   for e in table.entries[dim] if e.present]
        if not 1 <= kd <= SCHEMA.cardinality(dim):
            raise BadK(f"{dim}: k={kd} outside [1, {SCHEMA.cardinality(dim)}]")
        if kd > len(present):
            raise BadK(f"{dim}: k={kd} but only {len(present)} values have a loss")
        present.sort(key=lambda t: (t[0], t[1]))
        chosen[dim] = tuple(v for _, _, v in present[:kd])
    return AttributeSelection(chosen, {d: k[d] for d in chosen}, table)


def apply_selection(manifest: DatasetManifest, selection: AttributeSelection) -> DatasetManifest:
    return slice_manifest(manifest, selection.values)
