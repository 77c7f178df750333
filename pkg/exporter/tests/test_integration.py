"""Exported files consumed through the evaluation package's public surface:
the manifest loads, validates with zero violations, and every pipeline runs.
Skipped when the openness package is not installed alongside."""
from __future__ import annotations

import json

import numpy as np
import pytest

openness = pytest.importorskip("openness")

from openness.cli import main as openness_main  # noqa: E402
from openness.store import load_dataset, validate_dataset  # noqa: E402

from openness_exporter.jobs import (  # noqa: E402
    ExportJob,
    export_caption_corpus,
    export_class_embeddings,
    export_image_embeddings,
    export_lexicon,
)

from conftest import write_images  # noqa: E402


@pytest.fixture()
def exported_dataset(tiny_checkpoint, hierarchy_file, tmp_path):
    out = tmp_path / "ds"
    job = ExportJob(model=str(tiny_checkpoint), out_dir=out, batch_size=2)
    export_class_embeddings(job, hierarchy_file)
    index = write_images(tmp_path / "imgs", [
        ("a.png", "dog"), ("b.png", "cat"), ("c.png", "car"),
        ("d.png", "bike"), ("e.png", "tram"), ("f.png", "dog"),
    ])
    export_image_embeddings(job, tmp_path / "imgs", index)
    src = tmp_path / "corpus" / "pairs.tsv"
    write_images(src.parent, [("x.png", "dog"), ("y.png", "cat"), ("z.png", "car")])
    src.write_text(
        "x.png\ta dog on grass\ny.png\tthe cat indoors\nz.png\ta car, parked\n",
        encoding="utf-8",
    )
    export_caption_corpus(job, src)
    return out / "manifest.json"


def test_exported_dataset_validates_cleanly(exported_dataset):
    dataset = load_dataset(exported_dataset)
    assert validate_dataset(dataset) == []
    assert dataset.n_vocabularies == 2
    assert dataset.images.embeddings.rows == 6
    assert dataset.captions is not None and dataset.captions.rows == 3


def test_two_image_smoke_container_loads(tiny_checkpoint, hierarchy_file, tmp_path):
    out = tmp_path / "ds"
    job = ExportJob(model=str(tiny_checkpoint), out_dir=out, batch_size=2)
    export_class_embeddings(job, hierarchy_file)
    index = write_images(tmp_path / "imgs", [("a.png", "dog"), ("b.png", "cat")])
    export_image_embeddings(job, tmp_path / "imgs", index)

    from openness.store import load_embedding_matrix

    matrix = load_embedding_matrix(out / "images.emb")
    assert (matrix.rows, matrix.dim) == (2, 16)
    assert matrix.normalized


def test_evaluation_pipelines_run_on_export(exported_dataset, tmp_path, capsys):
    assert openness_main(["validate", "--manifest", str(exported_dataset)]) == 0
    assert json.loads(capsys.readouterr().out) == {"violations": [], "count": 0}

    out = tmp_path / "ext.json"
    assert openness_main([
        "eval-extensibility", "--manifest", str(exported_dataset),
        "--seed", "3", "--samples", "8", "--out", str(out),
    ]) == 0
    results = json.loads(out.read_text())["results"]
    assert 0.0 <= results["acc_e"] <= 1.0

    out = tmp_path / "re.json"
    assert openness_main([
        "repe-enhance", "--manifest", str(exported_dataset), "--out", str(out),
        "--out-container", str(tmp_path / "enhanced.emb"), "--k", "2", "--pool", "3",
    ]) == 0


def test_exported_lexicon_feeds_adversarial_search(
    tiny_checkpoint, exported_dataset, tmp_path
):
    words = tmp_path / "words.txt"
    words.write_text("keyboard\nriver\ncloud\nspoon\n", encoding="utf-8")
    lex_out = tmp_path / "lex"
    job = ExportJob(model=str(tiny_checkpoint), out_dir=lex_out, batch_size=2)
    export_lexicon(job, words)

    out = tmp_path / "attack.json"
    assert openness_main([
        "adversarial", "--manifest", str(exported_dataset), "--out", str(out),
        "--target", "pets", "--lexicon", str(lex_out / "lexicon.txt"),
        "--lexicon-embeddings", str(lex_out / "lexicon.emb"),
        "--size", "2", "--strategy", "exhaustive",
    ]) == 0
    results = json.loads(out.read_text())["results"]
    assert len(results["selected"]) == 2
    assert 0.0 <= results["combined_conditional_accuracy"] <= results["closed_accuracy"]


def test_per_template_containers_ensemble_through_matcher(
    tiny_checkpoint, hierarchy_file, tmp_path
):
    out = tmp_path / "ds"
    job = ExportJob(
        model=str(tiny_checkpoint), out_dir=out, batch_size=2,
        templates=("a photo of a {}.", "a drawing of a {}."),
    )
    export_class_embeddings(job, hierarchy_file)

    from openness.matcher import ensemble_class_embedding
    from openness.store import load_embedding_matrix

    doc = json.loads((out / "manifest.json").read_text())
    stacks = [
        load_embedding_matrix(out / rel).data
        for rel in doc["text_features_templates"]
    ]
    anchors = np.stack(
        [ensemble_class_embedding([m[row] for m in stacks]) for row in range(5)]
    )
    norms = np.linalg.norm(anchors.astype(np.float64), axis=1)
    assert np.all(np.abs(norms - 1.0) < 1e-6)
