"""Shared fixtures: hand-checkable toy datasets and synthetic random ones."""
from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
import pytest

from openness.store import (
    CaptionCorpus,
    ClassCatalog,
    ClassEntry,
    EmbeddingMatrix,
    EvaluationDataset,
    LabeledImageSet,
    Vocabulary,
    VocabularyHierarchy,
    write_embedding_matrix,
    write_labels,
)

R2 = math.sqrt(2.0) / 2.0


def unit_rows(raw: np.ndarray) -> EmbeddingMatrix:
    data = np.asarray(raw, dtype=np.float64)
    data = data / np.linalg.norm(data, axis=1, keepdims=True)
    return EmbeddingMatrix(data.astype(np.float32), normalized=True)


@pytest.fixture
def toy():
    """Two images, three classes; every score is hand-checkable.

    x1 = (1, 0) labelled A, x2 = (0.6, 0.8) labelled B;
    A = (1, 0), B = (0, 1), C = (sqrt2/2, sqrt2/2).
    sim(x2, C) = 1.4 * sqrt2/2 = 0.98995 beats sim(x2, B) = 0.8.
    """
    texts = unit_rows([[1.0, 0.0], [0.0, 1.0], [R2, R2]])
    images = unit_rows([[1.0, 0.0], [0.6, 0.8]])
    catalog = ClassCatalog(
        [
            ClassEntry(0, "A", "a photo of a A", 0),
            ClassEntry(1, "B", "a photo of a B", 1),
            ClassEntry(2, "C", "a photo of a C", 2),
        ]
    )
    return {
        "texts": texts,
        "images": LabeledImageSet(images, np.array([0, 1])),
        "catalog": catalog,
        "target": Vocabulary("target", (0, 1)),
        "distractors": Vocabulary("extra", (2,)),
    }


def make_dataset(
    rng: np.random.Generator,
    vocab_sizes=(3, 2, 4),
    n_images: int = 48,
    dim: int = 8,
    captions: bool = False,
) -> EvaluationDataset:
    """Random unit-norm dataset; every class is guaranteed at least one image."""
    n_classes = int(sum(vocab_sizes))
    assert n_images >= n_classes
    texts = unit_rows(rng.standard_normal((n_classes, dim)))
    labels = np.concatenate(
        [np.arange(n_classes), rng.integers(0, n_classes, n_images - n_classes)]
    ).astype(np.int64)
    images = unit_rows(rng.standard_normal((n_images, dim)))
    catalog = ClassCatalog(
        [ClassEntry(c, f"class {c}", f"a photo of a class {c}", c) for c in range(n_classes)]
    )
    vocabs = []
    start = 0
    for i, size in enumerate(vocab_sizes):
        vocabs.append(Vocabulary(f"vocab {i}", tuple(range(start, start + size))))
        start += size
    corpus = None
    if captions:
        n_cap = 40
        cap_texts = tuple(
            f"caption {i} about class {int(rng.integers(0, n_classes))}" for i in range(n_cap)
        )
        corpus = CaptionCorpus(
            captions=cap_texts,
            text_embeddings=unit_rows(rng.standard_normal((n_cap, dim))),
            image_embeddings=unit_rows(rng.standard_normal((n_cap, dim))),
        )
    return EvaluationDataset(
        catalog=catalog,
        text_features=texts,
        images=LabeledImageSet(images, labels),
        hierarchy=VocabularyHierarchy(tuple(vocabs)),
        captions=corpus,
    )


def write_manifest(dataset: EvaluationDataset, directory: Path) -> Path:
    """Materialize a dataset as container files plus a manifest JSON."""
    directory.mkdir(parents=True, exist_ok=True)
    write_embedding_matrix(dataset.text_features, directory / "texts.emb")
    write_embedding_matrix(dataset.images.embeddings, directory / "images.emb")
    write_labels(dataset.images.labels, directory / "labels.u32")
    doc = {
        "version": 1,
        "text_features": "texts.emb",
        "image_features": "images.emb",
        "labels": "labels.u32",
        "catalog": [
            {"id": e.class_id, "name": e.name, "prompt": e.prompt_text, "row": e.text_embedding}
            for e in dataset.catalog
        ],
        "hierarchy": [
            {"label": v.label, "class_ids": list(v.class_ids)} for v in dataset.hierarchy
        ],
    }
    if dataset.captions is not None:
        (directory / "captions.txt").write_text(
            "\n".join(dataset.captions.captions) + "\n", encoding="utf-8"
        )
        write_embedding_matrix(dataset.captions.text_embeddings, directory / "cap_text.emb")
        write_embedding_matrix(dataset.captions.image_embeddings, directory / "cap_img.emb")
        doc["captions"] = {
            "texts": "captions.txt",
            "text_features": "cap_text.emb",
            "image_features": "cap_img.emb",
        }
    path = directory / "manifest.json"
    path.write_text(json.dumps(doc, indent=2), encoding="utf-8")
    return path
