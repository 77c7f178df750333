"""Feature-geometry diagnostics: alignment, uniformity, margins, class grids.

Alignment is the mean squared distance between matched image/text pairs; for
unit vectors it equals 2 - 2 * mean cosine. Uniformity is the log of the mean
Gaussian-kernel value exp(-2 d^2) over unordered distinct row pairs, which
for unit vectors lives in [-8, 0]: identical rows give 0, an antipodal pair
gives -8, three pairwise-orthonormal rows give -4.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import matcher
from ._sampling import STREAM_GRID, STREAM_UNIFORMITY, RawStream, subset_at
from .errors import (
    DataError,
    DimMismatch,
    EmptyInput,
    TooFewRows,
    UnknownClass,
)
from .store import (
    ClassCatalog,
    EmbeddingMatrix,
    LabeledImageSet,
    Vocabulary,
)

# Exact pairwise uniformity up to this many rows; above it, a seeded
# subsample of pairs is used and its size recorded in the report.
UNIFORMITY_EXACT_ROWS = 20_000
UNIFORMITY_PAIR_BUDGET = 200_000_000


def alignment_loss(image_vecs: np.ndarray, text_vecs: np.ndarray) -> float:
    """Mean squared Euclidean distance over positive (image, text) pairs."""
    a = np.asarray(image_vecs, dtype=np.float64)
    b = np.asarray(text_vecs, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if b.ndim == 1:
        b = b[None, :]
    if a.shape[0] == 0:
        raise EmptyInput("alignment over zero pairs")
    if a.shape != b.shape:
        raise DimMismatch(f"pair shapes differ: {a.shape} vs {b.shape}")
    diff = a - b
    return float(np.mean(np.einsum("ij,ij->i", diff, diff)))


@dataclass(frozen=True)
class UniformityStat:
    value: float
    pairs: int
    exact: bool


def _logsumexp_merge(run_max: float, run_sum: float, exponents: np.ndarray):
    block_max = float(exponents.max())
    if block_max > run_max:
        run_sum = run_sum * np.exp(run_max - block_max) + float(
            np.sum(np.exp(exponents - block_max))
        )
        run_max = block_max
    else:
        run_sum += float(np.sum(np.exp(exponents - run_max)))
    return run_max, run_sum


def uniformity_report(
    features: EmbeddingMatrix,
    *,
    max_exact_rows: int = UNIFORMITY_EXACT_ROWS,
    pair_budget: int = UNIFORMITY_PAIR_BUDGET,
    seed: int = 0,
    block: int = 256,
) -> UniformityStat:
    """log mean over unordered distinct pairs of exp(-2 * squared distance).

    Exact over all n(n-1)/2 pairs while n stays within max_exact_rows;
    beyond that a seeded uniform pair subsample of pair_budget pairs is
    taken, and the stat records how many pairs went in.
    """
    n = features.rows
    if n < 2:
        raise TooFewRows("uniformity needs at least two rows")
    data = features.data.astype(np.float64)
    sq = np.einsum("ij,ij->i", data, data)

    run_max = -np.inf
    run_sum = 0.0
    if n <= max_exact_rows:
        pairs = n * (n - 1) // 2
        for i0 in range(0, n, block):
            i1 = min(i0 + block, n)
            gram = data[i0:i1] @ data.T  # (b, n)
            d2 = sq[i0:i1, None] + sq[None, :] - 2.0 * gram
            exps = []
            for r in range(i1 - i0):
                row = d2[r, i0 + r + 1 :]  # strictly upper triangle: j > i
                if row.size:
                    exps.append(row)
            if exps:
                exponents = -2.0 * np.concatenate(exps)
                run_max, run_sum = _logsumexp_merge(run_max, run_sum, exponents)
        return UniformityStat(
            value=float(run_max + np.log(run_sum) - np.log(pairs)),
            pairs=pairs,
            exact=True,
        )

    # Seeded subsample, pairs drawn uniformly with replacement over i != j.
    source = RawStream(seed, STREAM_UNIFORMITY, 0, chunk=1 << 16)
    remaining = pair_budget
    chunk = 1 << 16
    while remaining > 0:
        take = min(chunk, remaining)
        words = source.raw_block(2 * take)
        i = (words[:take] % np.uint64(n)).astype(np.int64)
        j = (words[take:] % np.uint64(n - 1)).astype(np.int64)
        j = j + (j >= i)  # uniform over j != i
        diff = data[i] - data[j]
        d2 = np.einsum("ij,ij->i", diff, diff)
        run_max, run_sum = _logsumexp_merge(run_max, run_sum, -2.0 * d2)
        remaining -= take
    return UniformityStat(
        value=float(run_max + np.log(run_sum) - np.log(pair_budget)),
        pairs=pair_budget,
        exact=False,
    )


def uniformity_loss(features: EmbeddingMatrix, **kwargs) -> float:
    return uniformity_report(features, **kwargs).value


@dataclass(frozen=True)
class MarginHistogram:
    """Fixed-range histogram over [-1, 1] plus the exact margin median."""

    bin_edges: tuple[float, ...]
    counts: tuple[int, ...]
    median: float

    @property
    def total(self) -> int:
        return sum(self.counts)

    def as_dict(self) -> dict:
        return {
            "bin_edges": list(self.bin_edges),
            "counts": list(self.counts),
            "median": self.median,
        }


def margin_distribution(
    images: LabeledImageSet,
    vocab: Vocabulary,
    texts: EmbeddingMatrix,
    catalog: ClassCatalog,
    bins: int = 200,
) -> MarginHistogram:
    """Histogram of per-image margins; the median is taken before binning.

    Margins of unit vectors can mathematically reach +-2; the histogram
    range is pinned to [-1, 1], so values beyond it land in the edge bins
    (keeping the count total equal to the image count).
    """
    if bins < 1:
        raise DataError("bins must be at least 1")
    records = matcher.margins(images, vocab, texts, catalog)
    values = np.array([r.margin for r in records], dtype=np.float64)
    median = float(np.median(values))
    edges = np.linspace(-1.0, 1.0, bins + 1)
    counts, _ = np.histogram(np.clip(values, -1.0, 1.0), bins=edges)
    return MarginHistogram(
        bin_edges=tuple(float(e) for e in edges),
        counts=tuple(int(c) for c in counts),
        median=median,
    )


def class_similarity_grid(
    images: LabeledImageSet,
    class_ids,
    texts: EmbeddingMatrix,
    catalog: ClassCatalog,
    samples_per_class: int = 100,
    seed: int = 0,
) -> np.ndarray:
    """Grid[i, j] = mean cosine between sampled images of class i and text j.

    Image sampling is deterministic per (seed, class_id) and capped at the
    class's available rows, so the same call always sees the same images.
    """
    ids = [int(c) for c in class_ids]
    if not ids:
        raise DataError("grid needs at least one class")
    if samples_per_class < 1:
        raise DataError("samples_per_class must be at least 1")
    for cid in ids:
        if cid not in catalog:
            raise UnknownClass(f"class_id {cid} not in catalog")

    rows = catalog.rows_for(ids)
    text64 = texts.data[rows].astype(np.float64)
    grid = np.empty((len(ids), len(ids)), dtype=np.float64)
    labels = images.labels
    for gi, cid in enumerate(ids):
        mine = np.flatnonzero(labels == cid)
        if mine.size == 0:
            raise DataError(f"class_id {cid} has no images to sample")
        pick = subset_at(mine.size, min(samples_per_class, mine.size), seed, cid, STREAM_GRID)
        sampled = images.embeddings.data[mine[np.sort(pick)]].astype(np.float64)
        grid[gi] = (sampled @ text64.T).mean(axis=0)
    return grid


@dataclass(frozen=True)
class GeometryReport:
    """One dataset's geometry diagnostics, ready for serialization."""

    align_loss: float
    uniform_text: UniformityStat
    uniform_image: UniformityStat
    margin_histogram: MarginHistogram
    grid_class_ids: tuple[int, ...] | None = None
    grid: tuple[tuple[float, ...], ...] | None = None
    seed: int | None = None

    @property
    def uniform_total(self) -> float:
        return self.uniform_text.value + self.uniform_image.value

    def as_dict(self) -> dict:
        out = {
            "align_loss": self.align_loss,
            "uniform_text": self.uniform_text.value,
            "uniform_image": self.uniform_image.value,
            "uniform_total": self.uniform_total,
            "uniformity_pairs": {
                "text": {"pairs": self.uniform_text.pairs, "exact": self.uniform_text.exact},
                "image": {"pairs": self.uniform_image.pairs, "exact": self.uniform_image.exact},
            },
            "margin_median": self.margin_histogram.median,
            "margin_histogram": self.margin_histogram.as_dict(),
            "seed": self.seed,
        }
        if self.grid is not None:
            out["class_similarity_grid"] = {
                "class_ids": list(self.grid_class_ids),
                "values": [list(row) for row in self.grid],
            }
        return out


def geometry_report(
    dataset,
    bins: int = 200,
    grid_class_ids=None,
    samples_per_class: int = 100,
    seed: int = 0,
    max_exact_rows: int = UNIFORMITY_EXACT_ROWS,
    pair_budget: int = UNIFORMITY_PAIR_BUDGET,
) -> GeometryReport:
    """Assemble the full geometry battery for one dataset.

    Alignment pairs each image with the text feature of its true class;
    text uniformity runs over the class text features, image uniformity over
    the image features; margins use the full hierarchy vocabulary.
    """
    catalog = dataset.catalog
    label_rows = catalog.rows_for(dataset.images.labels)
    align = alignment_loss(
        dataset.images.embeddings.data, dataset.text_features.data[label_rows]
    )
    uniform_text = uniformity_report(
        dataset.text_features, max_exact_rows=max_exact_rows, pair_budget=pair_budget, seed=seed
    )
    uniform_image = uniformity_report(
        dataset.images.embeddings, max_exact_rows=max_exact_rows, pair_budget=pair_budget, seed=seed
    )
    vocab = dataset.full_vocabulary()
    histogram = margin_distribution(dataset.images, vocab, dataset.text_features, catalog, bins)

    grid = None
    grid_ids = None
    if grid_class_ids is not None:
        grid_ids = tuple(int(c) for c in grid_class_ids)
        values = class_similarity_grid(
            dataset.images, grid_ids, dataset.text_features, catalog, samples_per_class, seed
        )
        grid = tuple(tuple(float(x) for x in row) for row in values)
    return GeometryReport(
        align_loss=align,
        uniform_text=uniform_text,
        uniform_image=uniform_image,
        margin_histogram=histogram,
        grid_class_ids=grid_ids,
        grid=grid,
        seed=seed,
    )
