"""Retrieval backends: exhaustive cosine search over aggregated descriptors,
and a simplified selective match kernel over binarized per-cell residuals of
projected local features."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .embed import EmbeddingModel, aggregate
from .errors import CodebookMismatchError, TooFewVectorsError
from .worldgen import ViewImage

RankedList = list[tuple[int, float]]  # (view_id, score), descending score


@dataclass
class Codebook:
    centroids: np.ndarray  # (C, e)
    sse_trace: list[float] = field(default_factory=list, compare=False)

    @property
    def size(self) -> int:
        return self.centroids.shape[0]


@dataclass
class AsmkSignature:
    cells: dict[int, np.ndarray]  # cell id -> sign vector in {-1, 0, +1}^e
    dim: int


def _assign(vectors: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d2 = (
        np.sum(vectors * vectors, axis=1)[:, None]
        + np.sum(centroids * centroids, axis=1)[None, :]
        - 2.0 * (vectors @ centroids.T)
    )
    return np.argmin(d2, axis=1)


def train_codebook(vectors: np.ndarray, c: int, iters: int = 10, seed: int = 0) -> Codebook:
    """k-means with k-means++ seeding and a fixed iteration count.

    Empty clusters are re-seeded from the point farthest from its centroid,
    which cannot increase the within-cluster SSE.
    """
    vectors = np.asarray(vectors, dtype=float)
    if c < 1:
        raise ValueError("cluster count must be >= 1")
    if vectors.shape[0] < c:
        raise TooFewVectorsError(f"too few vectors: {vectors.shape[0]} < {c}")
    rng = np.random.default_rng(seed)

    # k-means++ seeding
    centroids = np.empty((c, vectors.shape[1]))
    first = int(rng.integers(vectors.shape[0]))
    centroids[0] = vectors[first]
    d2 = np.sum((vectors - centroids[0]) ** 2, axis=1)
    for i in range(1, c):
        total = float(d2.sum())
        if total == 0.0:
            centroids[i] = vectors[int(rng.integers(vectors.shape[0]))]
        else:
            r = rng.random() * total
            idx = int(np.searchsorted(np.cumsum(d2), r))
            idx = min(idx, vectors.shape[0] - 1)
            centroids[i] = vectors[idx]
        d2 = np.minimum(d2, np.sum((vectors - centroids[i]) ** 2, axis=1))

    sse_trace = []
    for _ in range(iters):
        labels = _assign(vectors, centroids)
        for k in range(c):
            members = vectors[labels == k]
            if members.shape[0] == 0:
                res = np.sum((vectors - centroids[labels]) ** 2, axis=1)
                far = int(np.argmax(res))
                centroids[k] = vectors[far]
                labels[far] = k
            else:
                centroids[k] = members.mean(axis=0)
        sse = float(np.sum((vectors - centroids[_assign(vectors, centroids)]) ** 2))
        sse_trace.append(sse)
    return Codebook(centroids=centroids, sse_trace=sse_trace)


def asmk_aggregate(view: ViewImage, model: EmbeddingModel, codebook: Codebook) -> AsmkSignature:
    """Per-cell binarized residual signature of a view's projected features.

    Cells whose residual sum cancels to zero are dropped rather than given an
    arbitrary sign.
    """
    z = view.descriptors() @ model.projection.T
    labels = _assign(z, codebook.centroids)
    cells: dict[int, np.ndarray] = {}
    for cell in sorted(set(int(l) for l in labels)):
        residuals = z[labels == cell] - codebook.centroids[cell]
        total = residuals.sum(axis=0)
        norm = float(np.linalg.norm(total))
        if norm == 0.0:
            continue  # degenerate cancellation
        cells[cell] = np.sign(total / norm).astype(np.int8)
    return AsmkSignature(cells=cells, dim=model.e)


def _selectivity(u: float, alpha: float, sel_threshold: float) -> float:
    if u < sel_threshold:
        return 0.0
    return float(np.sign(u) * abs(u) ** alpha)


def asmk_score(
    a: AsmkSignature, b: AsmkSignature, alpha: float = 3.0, sel_threshold: float = 0.0
) -> float:
    """Sum of the selectivity-weighted cosine of shared-cell sign vectors,
    normalized by the geometric mean of the occupied-cell counts."""
    if a.dim != b.dim:
        raise CodebookMismatchError("codebook mismatch")
    if not a.cells or not b.cells:
        return 0.0
    total = 0.0
    # sorted shared cells and integer dot products keep the score exactly
    # symmetric and the self-score exactly 1
    for cell in sorted(a.cells.keys() & b.cells.keys()):
        va, vb = a.cells[cell], b.cells[cell]
        dot = int(np.dot(va.astype(int), vb.astype(int)))
        nnz = np.count_nonzero(va) * np.count_nonzero(vb)
        u = dot / float(np.sqrt(nnz))
        total += _selectivity(u, alpha, sel_threshold)
    return total / float(np.sqrt(len(a.cells) * len(b.cells)))


@dataclass
class RetrievalIndex:
    view_ids: list[int]
    embeddings: np.ndarray  # (n, e), unit rows
    signatures: dict[int, AsmkSignature] | None = None
    codebook: Codebook | None = None


def build_index(
    views: list[ViewImage], model: EmbeddingModel, codebook: Codebook | None = None
) -> RetrievalIndex:
    ids = [v.id for v in views]
    emb = np.array([aggregate(v, model) for v in views])
    sigs = None
    if codebook is not None:
        sigs = {v.id: asmk_aggregate(v, model, codebook) for v in views}
    return RetrievalIndex(view_ids=ids, embeddings=emb, signatures=sigs, codebook=codebook)


def retrieve(
    query: ViewImage,
    index: RetrievalIndex,
    model: EmbeddingModel,
    backend: str = "global_cosine",
    k: int = 10,
    alpha: float = 3.0,
    sel_threshold: float = 0.0,
) -> RankedList:
    """Top-k database views by the chosen backend; exhaustive scan with ties
    broken by ascending view id."""
    if not index.view_ids:
        raise ValueError("empty database")
    if k < 1:
        raise ValueError("k must be >= 1")
    if backend == "global_cosine":
        fq = aggregate(query, model)
        scores = index.embeddings @ fq
    elif backend == "asmk":
        if index.signatures is None or index.codebook is None:
            raise ValueError("index has no match-kernel signatures")
        sig_q = asmk_aggregate(query, model, index.codebook)
        scores = np.array(
            [asmk_score(sig_q, index.signatures[vid], alpha, sel_threshold) for vid in index.view_ids]
        )
    else:
        raise ValueError(f"unknown backend {backend!r}")
    order = sorted(range(len(index.view_ids)), key=lambda i: (-float(scores[i]), index.view_ids[i]))
    return [(index.view_ids[i], float(scores[i])) for i in order[:k]]
