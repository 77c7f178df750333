"""Feature-geometry diagnostics against closed forms and scalar oracles."""
from __future__ import annotations

import math

import numpy as np
import pytest

from openness import errors
from openness.geometry import (
    GeometryReport,
    alignment_loss,
    class_similarity_grid,
    geometry_report,
    margin_distribution,
    uniformity_loss,
    uniformity_report,
)
from openness.matcher import margins
from openness.store import EmbeddingMatrix, Vocabulary

from conftest import make_dataset, unit_rows


# ---------------------------------------------------------------- alignment

def test_alignment_closed_forms():
    a = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert alignment_loss(a, a) == 0.0
    assert math.isclose(alignment_loss(a, -a), 4.0, abs_tol=1e-12)
    with pytest.raises(errors.EmptyInput):
        alignment_loss(np.empty((0, 2)), np.empty((0, 2)))
    with pytest.raises(errors.DimMismatch):
        alignment_loss(np.ones((2, 3)), np.ones((2, 4)))


def test_alignment_matches_scalar_pair_oracle():
    rng = np.random.default_rng(17)
    imgs = unit_rows(rng.standard_normal((50, 12))).data.astype(np.float64)
    txts = unit_rows(rng.standard_normal((50, 12))).data.astype(np.float64)
    got = alignment_loss(imgs, txts)
    want = math.fsum(
        math.fsum((float(imgs[i, d]) - float(txts[i, d])) ** 2 for d in range(12))
        for i in range(50)
    ) / 50.0
    assert abs(got - want) <= 1e-12
    # for unit vectors this equals 2 - 2 * mean cosine; float32 rows are unit
    # only to ~1e-7, so the identity holds to that scale, not to 1e-12
    mean_cos = math.fsum(float(np.dot(imgs[i], txts[i])) for i in range(50)) / 50.0
    assert abs(got - (2.0 - 2.0 * mean_cos)) <= 1e-5


# --------------------------------------------------------------- uniformity

def test_uniformity_closed_forms():
    same = unit_rows(np.tile([1.0, 0.0], (4, 1)))
    stat = uniformity_report(same)
    assert abs(stat.value - 0.0) <= 1e-9
    assert stat.exact and stat.pairs == 6

    anti = unit_rows([[1.0, 0.0], [-1.0, 0.0]])
    assert abs(uniformity_loss(anti) - (-8.0)) <= 1e-9

    ortho = unit_rows(np.eye(3))
    # every distinct pair at squared distance 2: log exp(-4) = -4
    assert abs(uniformity_loss(ortho) - (-4.0)) <= 1e-9

    with pytest.raises(errors.TooFewRows):
        uniformity_report(unit_rows([[1.0, 0.0]]))


def test_uniformity_matches_scalar_oracle():
    rng = np.random.default_rng(19)
    feats = unit_rows(rng.standard_normal((40, 8)))
    rows = feats.data.astype(np.float64)
    acc = []
    for i in range(40):
        for j in range(i + 1, 40):
            d2 = float(np.sum((rows[i] - rows[j]) ** 2))
            acc.append(math.exp(-2.0 * d2))
    want = math.log(math.fsum(acc) / len(acc))
    got = uniformity_report(feats)
    assert got.exact and got.pairs == len(acc)
    assert abs(got.value - want) <= 1e-12


def test_uniformity_rotation_invariance():
    rng = np.random.default_rng(20)
    feats = unit_rows(rng.standard_normal((30, 10)))
    q, _ = np.linalg.qr(rng.standard_normal((10, 10)))
    rotated = unit_rows(feats.data.astype(np.float64) @ q)
    # the rotated copy is re-quantized to float32, which moves each row by
    # about 1e-7; the statistic is smooth, so agreement lands around 1e-7
    assert abs(uniformity_loss(feats) - uniformity_loss(rotated)) <= 1e-6


def test_uniformity_subsample_close_to_exact_and_deterministic():
    rng = np.random.default_rng(21)
    feats = unit_rows(rng.standard_normal((300, 6)))
    exact = uniformity_report(feats)
    sub = uniformity_report(feats, max_exact_rows=100, pair_budget=60_000, seed=5)
    again = uniformity_report(feats, max_exact_rows=100, pair_budget=60_000, seed=5)
    assert not sub.exact and sub.pairs == 60_000
    assert sub.value == again.value  # same seed, same pairs, same float
    assert abs(sub.value - exact.value) < 0.05
    other = uniformity_report(feats, max_exact_rows=100, pair_budget=60_000, seed=6)
    assert other.value != sub.value


# ------------------------------------------------------------------ margins

def test_margin_histogram_counts_and_median(toy):
    vocab = Vocabulary("all", (0, 1, 2))
    hist = margin_distribution(toy["images"], vocab, toy["texts"], toy["catalog"], bins=8)
    assert hist.total == 2
    assert len(hist.counts) == 8
    assert len(hist.bin_edges) == 9
    recs = margins(toy["images"], vocab, toy["texts"], toy["catalog"])
    want_median = float(np.median([r.margin for r in recs]))
    assert hist.median == want_median
    # margins: one in (-0.25, 0], one in (0.25, 0.5]
    lo = np.searchsorted(hist.bin_edges, -0.1899, side="right") - 1
    assert hist.counts[lo] == 1
    with pytest.raises(errors.DataError):
        margin_distribution(toy["images"], vocab, toy["texts"], toy["catalog"], bins=0)


def test_margin_histogram_clips_out_of_range_without_losing_count():
    # pos score -0.9, best negative 0.9: margin -1.8 lands in the first bin
    texts = unit_rows([[1.0, 0.0], [-1.0, 0.0]])
    images_raw = unit_rows([[-0.9, math.sqrt(1 - 0.81)]])
    from openness.store import ClassCatalog, ClassEntry, LabeledImageSet

    catalog = ClassCatalog([ClassEntry(0, "p", "p", 0), ClassEntry(1, "n", "n", 1)])
    images = LabeledImageSet(images_raw, np.array([0]))
    hist = margin_distribution(images, Vocabulary("v", (0, 1)), texts, catalog, bins=4)
    assert hist.total == 1
    assert hist.counts[0] == 1
    assert hist.median < -1.0  # median stays unclipped


# --------------------------------------------------------------------- grid

def test_grid_diagonal_dominates_on_aligned_classes():
    # images sit exactly on their class text vectors
    texts = unit_rows(np.eye(4))
    from openness.store import ClassCatalog, ClassEntry, LabeledImageSet

    catalog = ClassCatalog([ClassEntry(i, f"c{i}", "p", i) for i in range(4)])
    reps = np.repeat(np.eye(4), 3, axis=0)
    images = LabeledImageSet(unit_rows(reps), np.repeat(np.arange(4), 3))
    grid = class_similarity_grid(images, [0, 1, 2, 3], texts, catalog, samples_per_class=2)
    assert np.allclose(np.diag(grid), 1.0, atol=1e-6)
    off = grid[~np.eye(4, dtype=bool)]
    assert np.max(np.abs(off)) <= 1e-6


def test_grid_is_deterministic_and_validates():
    dataset = make_dataset(np.random.default_rng(22), vocab_sizes=(4,), n_images=40)
    ids = list(dataset.catalog.ids)
    a = class_similarity_grid(
        dataset.images, ids, dataset.text_features, dataset.catalog, samples_per_class=3, seed=9
    )
    b = class_similarity_grid(
        dataset.images, ids, dataset.text_features, dataset.catalog, samples_per_class=3, seed=9
    )
    assert np.array_equal(a, b)
    c = class_similarity_grid(
        dataset.images, ids, dataset.text_features, dataset.catalog, samples_per_class=3, seed=10
    )
    assert not np.array_equal(a, c)
    with pytest.raises(errors.UnknownClass):
        class_similarity_grid(
            dataset.images, [999], dataset.text_features, dataset.catalog
        )
    with pytest.raises(errors.DataError):
        class_similarity_grid(
            dataset.images, [], dataset.text_features, dataset.catalog
        )


def test_grid_sampling_caps_at_available_rows():
    dataset = make_dataset(np.random.default_rng(23), vocab_sizes=(3,), n_images=9)
    ids = list(dataset.catalog.ids)
    grid = class_similarity_grid(
        dataset.images, ids, dataset.text_features, dataset.catalog, samples_per_class=1000
    )
    # oracle: with the cap hit, every class image participates
    rows = dataset.text_features.data.astype(np.float64)
    for gi, cid in enumerate(ids):
        mine = dataset.images.labels == cid
        want = (
            dataset.images.embeddings.data[mine].astype(np.float64) @ rows.T
        ).mean(axis=0)
        assert np.max(np.abs(grid[gi] - want)) <= 1e-12


# ------------------------------------------------------------------- report

def test_geometry_report_assembly():
    dataset = make_dataset(np.random.default_rng(24), vocab_sizes=(3, 3), n_images=30)
    report = geometry_report(dataset, bins=16, grid_class_ids=[0, 1], seed=4)
    assert isinstance(report, GeometryReport)
    assert abs(
        report.uniform_total - (report.uniform_text.value + report.uniform_image.value)
    ) <= 1e-15
    label_rows = dataset.catalog.rows_for(dataset.images.labels)
    want_align = alignment_loss(
        dataset.images.embeddings.data, dataset.text_features.data[label_rows]
    )
    assert report.align_loss == want_align
    doc = report.as_dict()
    assert doc["seed"] == 4
    assert doc["uniformity_pairs"]["text"]["exact"] is True
    assert doc["margin_histogram"]["counts"]
    assert doc["margin_median"] == report.margin_histogram.median
    assert len(doc["class_similarity_grid"]["values"]) == 2
    no_grid = geometry_report(dataset, bins=16)
    assert "class_similarity_grid" not in no_grid.as_dict()
