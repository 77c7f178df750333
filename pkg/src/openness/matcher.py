"""Cosine scoring, argmax prediction, accuracy, and margins.

All candidate sets are ordered; an argmax tie resolves to the earliest
position in the presented vocabulary. That rule is what makes candidate-set
growth monotone: a class appended later can only displace the current winner
with a strictly greater score, so per-image correctness never improves as
distractors are added.

Scores are plain float64 ndarrays of shape (n_images, n_classes); all
accumulation happens in 64-bit regardless of the float32 storage dtype.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import (
    DimMismatch,
    EmptyList,
    EmptyVocabulary,
    LabelOutsideVocabulary,
    NotNormalized,
    OverlapBetweenTargetAndDistractors,
    VocabularyTooSmall,
    ZeroNormMean,
)
from .store import ClassCatalog, EmbeddingMatrix, LabeledImageSet, Vocabulary


@dataclass(frozen=True)
class Prediction:
    image_index: int
    predicted_position: int
    predicted_class_id: int
    top_score: float


@dataclass(frozen=True)
class MarginRecord:
    """Separation between the true class score and the best wrong score."""

    image_index: int
    label: int
    positive_score: float
    max_negative_score: float

    @property
    def margin(self) -> float:
        return self.positive_score - self.max_negative_score


def similarity_matrix(images: EmbeddingMatrix, texts: EmbeddingMatrix) -> np.ndarray:
    """Pairwise cosine scores, images by texts, accumulated in float64.

    Both inputs must carry the normalized flag; cosine of unit vectors is
    then the plain dot product.
    """
    if images.dim != texts.dim:
        raise DimMismatch(f"image dim {images.dim} != text dim {texts.dim}")
    if not images.normalized:
        raise NotNormalized("image embeddings are not unit-normalized")
    if not texts.normalized:
        raise NotNormalized("text embeddings are not unit-normalized")
    return images.data.astype(np.float64) @ texts.data.astype(np.float64).T


def _vocab_scores(
    images: LabeledImageSet,
    vocab_ids: Sequence[int],
    texts: EmbeddingMatrix,
    catalog: ClassCatalog,
) -> np.ndarray:
    rows = catalog.rows_for(vocab_ids)
    sub = EmbeddingMatrix(texts.data[rows], texts.normalized)
    return similarity_matrix(images.embeddings, sub)


def _require_labels_inside(images: LabeledImageSet, vocab: Vocabulary) -> None:
    outside = set(int(c) for c in images.labels) - set(vocab.class_ids)
    if outside:
        raise LabelOutsideVocabulary(
            f"labels {sorted(outside)} are not in vocabulary {vocab.label!r}"
        )


def predict(score_row: Sequence[float], vocab: Vocabulary, image_index: int = 0) -> Prediction:
    """Argmax over one score row; ties go to the earliest position."""
    scores = np.asarray(score_row, dtype=np.float64)
    if scores.size == 0:
        raise EmptyVocabulary("cannot predict against zero candidates")
    if scores.shape[0] != len(vocab):
        raise DimMismatch(f"{scores.shape[0]} scores for {len(vocab)} classes")
    pos = int(np.argmax(scores))  # first occurrence of the maximum
    return Prediction(
        image_index=image_index,
        predicted_position=pos,
        predicted_class_id=vocab.class_ids[pos],
        top_score=float(scores[pos]),
    )


def accuracy(
    images: LabeledImageSet,
    vocab: Vocabulary,
    texts: EmbeddingMatrix,
    catalog: ClassCatalog,
) -> float:
    """Fraction of images whose argmax class equals the ground-truth label."""
    _require_labels_inside(images, vocab)
    scores = _vocab_scores(images, vocab.class_ids, texts, catalog)
    ids = np.asarray(vocab.class_ids, dtype=np.int64)
    predicted = ids[np.argmax(scores, axis=1)]
    return float(np.mean(predicted == images.labels))


def conditional_accuracy(
    images: LabeledImageSet,
    target: Vocabulary,
    distractors: Vocabulary | None,
    texts: EmbeddingMatrix,
    catalog: ClassCatalog,
) -> float:
    """Accuracy of target-labelled images against target plus distractors.

    The candidate set is the target vocabulary followed by the distractors,
    in order. An empty distractor set reduces to plain accuracy, exactly.
    """
    if distractors is None or len(distractors) == 0:
        return accuracy(images, target, texts, catalog)
    shared = set(target.class_ids) & set(distractors.class_ids)
    if shared:
        raise OverlapBetweenTargetAndDistractors(
            f"classes {sorted(shared)} appear on both sides"
        )
    _require_labels_inside(images, target)
    combined = tuple(target.class_ids) + tuple(distractors.class_ids)
    scores = _vocab_scores(images, combined, texts, catalog)
    ids = np.asarray(combined, dtype=np.int64)
    predicted = ids[np.argmax(scores, axis=1)]
    return float(np.mean(predicted == images.labels))


def margins(
    images: LabeledImageSet,
    vocab: Vocabulary,
    texts: EmbeddingMatrix,
    catalog: ClassCatalog,
) -> list[MarginRecord]:
    """Per-image positive-minus-best-negative score separation.

    margin > 0 iff the prediction is correct; margin == 0 means a tie that
    position order resolved.
    """
    if len(vocab) < 2:
        raise VocabularyTooSmall("margins need at least two candidate classes")
    _require_labels_inside(images, vocab)
    scores = _vocab_scores(images, vocab.class_ids, texts, catalog)
    position = {cid: i for i, cid in enumerate(vocab.class_ids)}
    label_pos = np.array([position[int(l)] for l in images.labels], dtype=np.int64)
    rows = np.arange(scores.shape[0])
    positive = scores[rows, label_pos]
    masked = scores.copy()
    masked[rows, label_pos] = -np.inf
    negative = masked.max(axis=1)
    return [
        MarginRecord(
            image_index=int(i),
            label=int(images.labels[i]),
            positive_score=float(positive[i]),
            max_negative_score=float(negative[i]),
        )
        for i in rows
    ]


def ensemble_class_embedding(per_prompt: Sequence[np.ndarray] | np.ndarray) -> np.ndarray:
    """Average unit prompt embeddings and renormalize; float32 unit output."""
    arr = np.asarray(per_prompt, dtype=np.float64)
    if arr.size == 0:
        raise EmptyList("ensemble over zero prompt embeddings")
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise DimMismatch(f"expected (k, dim) prompt embeddings, got ndim={arr.ndim}")
    norms = np.linalg.norm(arr, axis=1)
    if np.max(np.abs(norms - 1.0)) > 1e-3:
        raise NotNormalized("prompt embeddings must be unit-norm before ensembling")
    mean = arr.mean(axis=0)
    mean_norm = float(np.linalg.norm(mean))
    if mean_norm < 1e-12:
        raise ZeroNormMean("prompt embeddings cancel out; cannot renormalize")
    return (mean / mean_norm).astype(np.float32)
