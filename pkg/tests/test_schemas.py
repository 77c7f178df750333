"""The shipped JSON Schema documents accept real report output and reject
shapes that drift from it. Keeps docs/schemas/ honest against the CLI."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest
from jsonschema import Draft202012Validator

from openness.cli import main
from openness.store import write_embedding_matrix

from conftest import make_dataset, unit_rows, write_manifest

SCHEMA_DIR = Path(__file__).resolve().parent.parent / "docs" / "schemas"


def _schema(name: str) -> Draft202012Validator:
    doc = json.loads((SCHEMA_DIR / name).read_text(encoding="utf-8"))
    Draft202012Validator.check_schema(doc)
    return Draft202012Validator(doc)


@pytest.fixture(scope="module")
def bundle_schema():
    return _schema("report-bundle.schema.json")


@pytest.fixture(scope="module")
def manifest(tmp_path_factory):
    dataset = make_dataset(
        np.random.default_rng(51), vocab_sizes=(3, 2, 4), n_images=36, captions=True
    )
    return write_manifest(dataset, tmp_path_factory.mktemp("ds"))


def _bundle(out: Path, *argv) -> dict:
    assert main([str(a) for a in argv]) == 0
    return json.loads(out.read_text(encoding="utf-8"))


def test_schema_documents_are_valid_2020_12():
    _schema("report-bundle.schema.json")
    _schema("validate-report.schema.json")


def test_validate_payload_matches_schema(manifest, tmp_path):
    out = tmp_path / "v.json"
    assert main(["validate", "--manifest", str(manifest), "--out", str(out)]) == 0
    _schema("validate-report.schema.json").validate(json.loads(out.read_text()))


def test_eval_closed_bundle_matches_schema(manifest, tmp_path, bundle_schema):
    out = tmp_path / "c.json"
    bundle_schema.validate(_bundle(out, "eval-closed", "--manifest", manifest, "--out", out))


def test_eval_extensibility_bundles_match_schema(manifest, tmp_path, bundle_schema):
    out = tmp_path / "e.json"
    bundle_schema.validate(_bundle(
        out, "eval-extensibility", "--manifest", manifest,
        "--seed", 7, "--samples", 20, "--out", out,
    ))
    bundle_schema.validate(_bundle(
        out, "eval-extensibility", "--manifest", manifest,
        "--seed", 7, "--exact", "--out", out,
    ))


def test_eval_stability_bundles_match_schema(manifest, tmp_path, bundle_schema):
    out = tmp_path / "s.json"
    bundle_schema.validate(_bundle(
        out, "eval-stability", "--manifest", manifest,
        "--seed", 7, "--samples", 20, "--out", out,
    ))
    bundle_schema.validate(_bundle(
        out, "eval-stability", "--manifest", manifest,
        "--seed", 7, "--samples", 20, "--target", "vocab 1", "--out", out,
    ))


def test_adversarial_bundle_matches_schema(manifest, tmp_path, bundle_schema):
    rng = np.random.default_rng(61)
    words = tmp_path / "words.txt"
    words.write_text("alpha\nbeta\ngamma\n", encoding="utf-8")
    write_embedding_matrix(unit_rows(rng.standard_normal((3, 8))), tmp_path / "words.emb")
    out = tmp_path / "a.json"
    bundle_schema.validate(_bundle(
        out, "adversarial", "--manifest", manifest, "--out", out,
        "--target", "vocab 0", "--lexicon", words,
        "--lexicon-embeddings", tmp_path / "words.emb", "--size", 2,
    ))


def test_geometry_bundle_matches_schema(manifest, tmp_path, bundle_schema):
    out = tmp_path / "g.json"
    bundle_schema.validate(_bundle(
        out, "geometry", "--manifest", manifest, "--out", out,
        "--grid-classes", "all", "--samples-per-class", 3, "--seed", 5,
    ))


def test_repe_bundles_match_schema(manifest, tmp_path, bundle_schema):
    out = tmp_path / "rb.json"
    bundle_schema.validate(_bundle(out, "repe-build", "--manifest", manifest, "--out", out))
    out = tmp_path / "re.json"
    bundle_schema.validate(_bundle(
        out, "repe-enhance", "--manifest", manifest, "--out", out,
        "--out-container", tmp_path / "re.emb", "--k", 4, "--pool", 8,
    ))


def test_schema_rejects_drifted_bundles(manifest, tmp_path, bundle_schema):
    out = tmp_path / "c.json"
    bundle = _bundle(out, "eval-closed", "--manifest", manifest, "--out", out)

    missing = json.loads(json.dumps(bundle))
    del missing["results"]["acc_c"]
    assert list(bundle_schema.iter_errors(missing))

    extra = json.loads(json.dumps(bundle))
    extra["results"]["surprise"] = 1
    assert list(bundle_schema.iter_errors(extra))

    wrong_type = json.loads(json.dumps(bundle))
    wrong_type["results"]["per_vocabulary_accuracy"] = "high"
    assert list(bundle_schema.iter_errors(wrong_type))
