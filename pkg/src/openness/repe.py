"""Retrieval-enhanced class embeddings from a caption corpus.

For each class, the class text feature queries the caption corpus on the
image side; captions that survive a candidate-pool cut and a class-name
filter contribute their text-side embeddings to an interpolated, renormalized
anchor. Retrieval is an exact blocked scan, so results are bit-reproducible
and independent of corpus chunking.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    DataError,
    DimMismatch,
    EmptyCorpus,
    ZeroNormResult,
)
from .store import (
    CaptionCorpus,
    EmbeddingMatrix,
    EvaluationDataset,
    normalize_name,
)


@dataclass(frozen=True)
class RepeConfig:
    """k retrieved captions per class, pool size before filtering, blend weight."""

    k: int = 100
    candidate_pool: int = 1000
    blend: float = 0.25

    def __post_init__(self):
        if self.k < 1:
            raise DataError("k must be at least 1")
        if self.candidate_pool < self.k:
            raise DataError("candidate_pool must be at least k")
        if not 0.0 <= self.blend <= 1.0:
            raise DataError("blend weight must lie in [0, 1]")


@dataclass(frozen=True)
class RetrievalHit:
    corpus_row: int
    score: float
    caption: str


@dataclass(frozen=True)
class RetrievalResult:
    hits: tuple[RetrievalHit, ...]
    underfilled: bool  # fewer than k captions survived the name filter


class RetrievalIndex:
    """Exact scan over the corpus's image-side embeddings, block by block."""

    def __init__(self, corpus: CaptionCorpus, block: int = 65536):
        if corpus is None or corpus.rows == 0:
            raise EmptyCorpus("cannot index an empty corpus")
        self.corpus = corpus
        self.block = block

    def top_candidates(self, query: np.ndarray, pool: int) -> tuple[np.ndarray, np.ndarray]:
        """Indices and scores of the `pool` best rows.

        Ordered by descending score, then ascending row for equal scores;
        exact, whatever the block size.
        """
        q = np.asarray(query, dtype=np.float64).reshape(-1)
        data = self.corpus.image_embeddings.data
        if q.shape[0] != data.shape[1]:
            raise DimMismatch(f"query dim {q.shape[0]} != corpus dim {data.shape[1]}")
        n = data.shape[0]
        scores = np.empty(n, dtype=np.float64)
        for i0 in range(0, n, self.block):
            i1 = min(i0 + self.block, n)
            # row-local reduce: the summation tree depends only on the dim,
            # so scores are bit-identical under any block size (matmul is
            # not; BLAS picks shape-dependent kernels)
            scores[i0:i1] = np.add.reduce(data[i0:i1] * q, axis=1)
        pool = min(pool, n)
        if pool < n:
            # Everything at or above the pool-th score survives to the exact
            # tie-break, so boundary ties cannot drop a lower row id.
            threshold = np.partition(scores, n - pool)[n - pool]
            candidates = np.flatnonzero(scores >= threshold)
        else:
            candidates = np.arange(n)
        order = np.lexsort((candidates, -scores[candidates]))
        chosen = candidates[order][:pool]
        return chosen, scores[chosen]


def build_retrieval_index(corpus: CaptionCorpus, block: int = 65536) -> RetrievalIndex:
    return RetrievalIndex(corpus, block)


def _caption_mentions(caption: str, class_name: str) -> bool:
    """Whole-string substring match after NFC + casefold; multi-word names
    must appear as the contiguous phrase."""
    return normalize_name(class_name) in normalize_name(caption)


def retrieve_captions(
    index: RetrievalIndex,
    query: np.ndarray,
    class_name: str,
    config: RepeConfig = RepeConfig(),
) -> RetrievalResult:
    """Top candidate_pool rows by score, name-filtered, first k survivors."""
    rows, scores = index.top_candidates(query, config.candidate_pool)
    hits: list[RetrievalHit] = []
    for row, score in zip(rows, scores):
        caption = index.corpus.captions[int(row)]
        if not _caption_mentions(caption, class_name):
            continue
        hits.append(RetrievalHit(corpus_row=int(row), score=float(score), caption=caption))
        if len(hits) == config.k:
            break
    return RetrievalResult(hits=tuple(hits), underfilled=len(hits) < config.k)


def enhance_class_embedding(
    base: np.ndarray,
    retrieved: np.ndarray | None,
    blend: float,
) -> np.ndarray:
    """Blend the base anchor toward the mean retrieved embedding, renormalized.

    blend 0, or nothing retrieved, returns the base bits untouched; the
    float32 output is otherwise renormalized in float64.
    """
    base = np.asarray(base)
    if blend == 0.0 or retrieved is None or np.size(retrieved) == 0:
        return base.copy()
    arr = np.asarray(retrieved, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.shape[1] != base.shape[0]:
        raise DimMismatch(
            f"retrieved dim {arr.shape[1]} != base dim {base.shape[0]}"
        )
    mixed = (1.0 - blend) * base.astype(np.float64) + blend * arr.mean(axis=0)
    norm = float(np.linalg.norm(mixed))
    if norm < 1e-12:
        raise ZeroNormResult("interpolated embedding has zero norm")
    return (mixed / norm).astype(base.dtype)


@dataclass(frozen=True)
class ClassAudit:
    class_id: int
    name: str
    retrieved: int
    underfilled: bool
    hit_rows: tuple[int, ...]

    def as_dict(self) -> dict:
        return {
            "class_id": self.class_id,
            "name": self.name,
            "retrieved": self.retrieved,
            "underfilled": self.underfilled,
            "hit_rows": list(self.hit_rows),
        }


def repe_enhance_catalog(
    dataset: EvaluationDataset,
    corpus: CaptionCorpus | None = None,
    config: RepeConfig = RepeConfig(),
) -> tuple[EmbeddingMatrix, list[ClassAudit]]:
    """Enhanced text features plus one retrieval audit entry per class.

    Classes with no surviving retrievals, or a zero blend weight, keep their
    original bits; text rows not referenced by the catalog are copied through
    unchanged.
    """
    corpus = corpus if corpus is not None else dataset.captions
    if corpus is None:
        raise EmptyCorpus("dataset has no caption corpus to retrieve from")
    if corpus.text_embeddings.dim != dataset.text_features.dim:
        raise DimMismatch(
            f"corpus text dim {corpus.text_embeddings.dim} != "
            f"class text dim {dataset.text_features.dim}"
        )
    index = build_retrieval_index(corpus)
    out = np.array(dataset.text_features.data, copy=True)
    audits: list[ClassAudit] = []
    for entry in dataset.catalog:
        base = dataset.text_features.data[entry.text_embedding]
        result = retrieve_captions(index, base.astype(np.float64), entry.name, config)
        rows = [h.corpus_row for h in result.hits]
        if rows and config.blend != 0.0:
            retrieved = corpus.text_embeddings.data[rows].astype(np.float64)
            out[entry.text_embedding] = enhance_class_embedding(base, retrieved, config.blend)
        audits.append(
            ClassAudit(
                class_id=entry.class_id,
                name=entry.name,
                retrieved=len(rows),
                underfilled=result.underfilled,
                hit_rows=tuple(rows),
            )
        )
    return EmbeddingMatrix(out, dataset.text_features.normalized), audits


def margin_shift(dataset: EvaluationDataset, enhanced: EmbeddingMatrix, bins: int = 200):
    """Margin histograms before and after enhancement, on the same images."""
    from .geometry import margin_distribution

    vocab = dataset.full_vocabulary()
    before = margin_distribution(
        dataset.images, vocab, dataset.text_features, dataset.catalog, bins
    )
    after = margin_distribution(dataset.images, vocab, enhanced, dataset.catalog, bins)
    return {"before": before, "after": after, "median_shift": after.median - before.median}
