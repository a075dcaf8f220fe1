"""Query/gallery retrieval metrics: mAP and CMC with same-camera exclusion."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimMismatch, EmptyGalleryAfterExclusion, FormatError, NoRelevant


@dataclass(frozen=True, eq=False)
class EmbeddingSet:
    vectors: np.ndarray  # (n, D)
    identities: np.ndarray
    cameras: np.ndarray

    def __post_init__(self):
        vectors = np.atleast_2d(np.asarray(self.vectors, dtype=np.float64))
        object.__setattr__(self, "vectors", vectors)
        object.__setattr__(self, "identities", np.asarray(self.identities, dtype=np.int64))
        object.__setattr__(self, "cameras", np.asarray(self.cameras, dtype=np.int64))
        if not (len(vectors) == len(self.identities) == len(self.cameras)):
            raise DimMismatch("vectors and identity/camera labels differ in length")
        if not np.all(np.isfinite(vectors)):
            raise ValueError("embeddings must be finite")

    def __len__(self) -> int:
        return len(self.vectors)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass(frozen=True)
class EvalReport:
    mAP: float
    cmc: dict = field(default_factory=dict)  # rank -> fraction
    num_queries_evaluated: int = 0
    num_queries_skipped: int = 0

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["metric", "value"])
        writer.writerow(["mAP", repr(self.mAP)])
        for rank in sorted(self.cmc):
            writer.writerow([f"cmc@{rank}", repr(self.cmc[rank])])
        writer.writerow(["queries_evaluated", self.num_queries_evaluated])
        writer.writerow(["queries_skipped", self.num_queries_skipped])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "EvalReport | None":
        """Parse an eval CSV; returns None for a "no eval" marker file."""
        rows = [r for r in csv.reader(io.StringIO(text)) if r]
        if not rows or rows[0] != ["metric", "value"]:
            raise FormatError("line 1: missing header 'metric,value'")
        values = dict((r[0], r[1] if len(r) > 1 else "") for r in rows[1:])
        if "no eval" in values:
            return None
        try:
            cmc = {int(k[4:]): float(v) for k, v in values.items() if k.startswith("cmc@")}
            return cls(float(values["mAP"]), cmc, int(values["queries_evaluated"]),
                       int(values["queries_skipped"]))
        except (KeyError, ValueError) as err:
            raise FormatError(f"bad eval report: {err}") from None


def pairwise_distances(queries: EmbeddingSet, gallery: EmbeddingSet) -> np.ndarray:
    """Euclidean distance matrix, shape (len(queries), len(gallery))."""
    if queries.dim != gallery.dim:
        raise DimMismatch(f"query dim {queries.dim} != gallery dim {gallery.dim}")
    q, g = queries.vectors, gallery.vectors
    out = np.empty((len(q), len(g)))
    step = max(1, 2_000_000 // max(1, len(g) * q.shape[1]))
    for s in range(0, len(q), step):
        diff = q[s:s + step, None, :] - g[None, :, :]
        out[s:s + step] = np.sqrt(np.einsum("qgd,qgd->qg", diff, diff))
    return out


def average_precision(relevant: Sequence) -> float:
    """Mean of precision@k over the ranks k holding a relevant item."""
    flags = np.asarray(relevant, dtype=bool)
    hits = np.flatnonzero(flags)
    if len(hits) == 0:
        raise NoRelevant("ranking contains no relevant item")
    precision = np.arange(1, len(hits) + 1) / (hits + 1)
    return float(precision.mean())


def rank_query(distances: np.ndarray, query_id: int, query_cam: int, gallery: EmbeddingSet) -> np.ndarray:
    """Relevance flags of the gallery ranked by distance, after exclusion.

    Ties are broken by gallery index; entries sharing both identity and camera
    with the query are dropped.
    """
    order = np.argsort(distances, kind="stable")
    keep = ~((gallery.identities[order] == query_id) & (gallery.cameras[order] == query_cam))
    order = order[keep]
    if len(order) == 0:
        raise EmptyGalleryAfterExclusion("gallery is empty after same-camera exclusion")
    return gallery.identities[order] == query_id


def evaluate(queries: EmbeddingSet, gallery: EmbeddingSet, ranks: Sequence[int] = (1, 5)) -> EvalReport:
    if len(queries) == 0 or len(gallery) == 0:
        raise ValueError("query and gallery sets must be non-empty")
    ranks = sorted(set(int(r) for r in ranks) | {1, 5})
    dist = pairwise_distances(queries, gallery)
    aps, first_hits = [], []
    skipped = 0
    for qi in range(len(queries)):
        try:
            flags = rank_query(dist[qi], int(queries.identities[qi]), int(queries.cameras[qi]), gallery)
            aps.append(average_precision(flags))
        except (EmptyGalleryAfterExclusion, NoRelevant):
            skipped += 1
            continue
        first_hits.append(int(np.argmax(flags)) + 1)
    if not aps:
        return EvalReport(0.0, {r: 0.0 for r in ranks}, 0, skipped)
    hits = np.array(first_hits)
    n = len(aps)
    cmc = {r: float(np.count_nonzero(hits <= r) / n) for r in ranks}
    return EvalReport(float(np.mean(aps)), cmc, n, skipped)
