"""The four export pipelines: images, classes, captions, lexicon.

Each writes containers plus its fragment of the manifest, so running the
subcommands against the same manifest path accumulates a complete dataset.
Embedding math stays in the evaluation package; this side only encodes,
normalizes to unit rows, and keeps row alignment.
"""
from __future__ import annotations

import csv
import sys
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path

from . import container
from .encoder import CheckpointEncoder

DEFAULT_TEMPLATES = ("a photo of a {}.",)


class ExportError(RuntimeError):
    pass


def _check_template(template: str) -> None:
    # exactly one class-name slot, and it must actually format
    if template.count("{}") != 1:
        raise ExportError(
            f"template needs exactly one {{}} placeholder: {template!r}"
        )
    try:
        template.format("probe")
    except (IndexError, KeyError, ValueError) as exc:
        raise ExportError(f"unusable template {template!r}: {exc}") from exc


def normalize_name(name: str) -> str:
    return unicodedata.normalize("NFC", name).casefold().strip()


@dataclass(frozen=True)
class ExportJob:
    model: str
    out_dir: Path
    templates: tuple[str, ...] = DEFAULT_TEMPLATES
    batch_size: int = 32
    manifest: Path | None = None
    _encoder: list = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        if not self.templates:
            raise ExportError("at least one prompt template required")
        for t in self.templates:
            _check_template(t)
        if self.batch_size < 1:
            raise ExportError(f"batch size must be positive, got {self.batch_size}")
        object.__setattr__(self, "out_dir", Path(self.out_dir))
        manifest = self.manifest if self.manifest else self.out_dir / "manifest.json"
        object.__setattr__(self, "manifest", Path(manifest))

    def encoder(self) -> CheckpointEncoder:
        if not self._encoder:
            self._encoder.append(CheckpointEncoder(self.model))
        return self._encoder[0]


def _load_hierarchy(path) -> list[dict]:
    import json

    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(doc, list) or not doc:
        raise ExportError(f"{path}: expected a non-empty list of vocabularies")
    for item in doc:
        if "label" not in item or "classes" not in item or not item["classes"]:
            raise ExportError(f"{path}: each vocabulary needs a label and classes")
    return doc


def export_class_embeddings(job: ExportJob, hierarchy_path) -> dict:
    """Class-text containers plus catalog/hierarchy manifest entries.

    Class ids follow first appearance across vocabularies; one container per
    template. With several templates the manifest records them side by side
    and leaves text_features unset: combining per-template vectors into one
    anchor is the evaluation package's job.
    """
    groups = _load_hierarchy(hierarchy_path)
    names: list[str] = []
    seen: dict[str, int] = {}
    hierarchy_entries = []
    for group in groups:
        ids = []
        for raw in group["classes"]:
            key = normalize_name(str(raw))
            if key not in seen:
                seen[key] = len(names)
                names.append(str(raw).strip())
            ids.append(seen[key])
        hierarchy_entries.append({"label": str(group["label"]), "class_ids": ids})

    catalog = [
        {"id": i, "name": name, "prompt": job.templates[0].format(name)}
        for i, name in enumerate(names)
    ]

    encoder = job.encoder()
    written = []
    single = len(job.templates) == 1
    for t_index, template in enumerate(job.templates):
        prompts = [template.format(name) for name in names]
        matrix = encoder.encode_texts(prompts, job.batch_size)
        target = job.out_dir / ("texts.emb" if single else f"texts_t{t_index}.emb")
        container.write_container(matrix, target)
        written.append(target)
        print(f"classes: wrote {target} ({matrix.shape[0]}x{matrix.shape[1]})",
              file=sys.stderr)

    doc = container.load_manifest(job.manifest)
    doc["catalog"] = catalog
    doc["hierarchy"] = hierarchy_entries
    doc["prompt_templates"] = list(job.templates)
    if single:
        doc["text_features"] = container.manifest_relative(written[0], job.manifest)
        doc.pop("text_features_templates", None)
    else:
        doc["text_features_templates"] = [
            container.manifest_relative(p, job.manifest) for p in written
        ]
        doc.pop("text_features", None)
        print(
            "classes: several templates exported; ensemble them and set "
            "text_features before evaluation",
            file=sys.stderr,
        )
    container.save_manifest(doc, job.manifest)
    return {"containers": written, "classes": len(names), "manifest": job.manifest}


def _read_index(index_path) -> list[tuple[str, str]]:
    with open(index_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames or not {"file", "class"} <= set(reader.fieldnames):
            raise ExportError(f"{index_path}: index needs file,class columns")
        rows = [(row["file"], row["class"]) for row in reader]
    if not rows:
        raise ExportError(f"{index_path}: empty index")
    return rows


def export_image_embeddings(job: ExportJob, images_dir, index_path) -> dict:
    """Image container plus aligned labels, resolved against the catalog.

    Run the classes export first: label ids come from the manifest catalog,
    which is what keeps image labels and class rows speaking the same ids.
    Unreadable images are skipped (logged with their row) and their label
    rows dropped with them.
    """
    doc = container.load_manifest(job.manifest)
    if "catalog" not in doc:
        raise ExportError(
            f"{job.manifest}: manifest has no catalog yet; export classes first"
        )
    by_name = {normalize_name(c["name"]): int(c["id"]) for c in doc["catalog"]}

    images_dir = Path(images_dir)
    rows = _read_index(index_path)
    labels = []
    for file_name, class_name in rows:
        key = normalize_name(class_name)
        if key not in by_name:
            raise ExportError(f"{index_path}: unknown class {class_name!r} for {file_name}")
        labels.append(by_name[key])

    encoder = job.encoder()
    matrix, skipped = encoder.encode_images(
        [images_dir / name for name, _ in rows], job.batch_size
    )
    kept_labels = [lab for row, lab in enumerate(labels) if row not in set(skipped)]

    images_path = job.out_dir / "images.emb"
    labels_path = job.out_dir / "labels.u32"
    container.write_container(matrix, images_path)
    container.write_labels(kept_labels, labels_path)
    print(f"images: wrote {images_path} ({matrix.shape[0]}x{matrix.shape[1]}), "
          f"{len(skipped)} skipped", file=sys.stderr)

    doc = container.load_manifest(job.manifest)
    doc["image_features"] = container.manifest_relative(images_path, job.manifest)
    doc["labels"] = container.manifest_relative(labels_path, job.manifest)
    container.save_manifest(doc, job.manifest)
    return {
        "container": images_path,
        "labels": labels_path,
        "rows": int(matrix.shape[0]),
        "skipped_rows": skipped,
        "manifest": job.manifest,
    }


def _read_caption_source(source_path) -> list[tuple[str, str]]:
    pairs = []
    for line_no, line in enumerate(
        Path(source_path).read_text(encoding="utf-8").splitlines(), start=1
    ):
        if not line.strip():
            continue
        if "\t" not in line:
            raise ExportError(
                f"{source_path}:{line_no}: expected 'image<TAB>caption'"
            )
        path, caption = line.split("\t", 1)
        if not caption.strip():
            raise ExportError(f"{source_path}:{line_no}: empty caption")
        pairs.append((path.strip(), caption.strip()))
    if not pairs:
        raise ExportError(f"{source_path}: no caption rows")
    return pairs


def export_caption_corpus(job: ExportJob, source_path) -> dict:
    """Aligned caption triple: texts file plus text and image containers.

    Source format: one 'image<TAB>caption' row per line, image paths
    relative to the source file. A row whose image fails to load is dropped
    on both sides so the three outputs stay row-aligned.
    """
    source_path = Path(source_path)
    pairs = _read_caption_source(source_path)

    encoder = job.encoder()
    image_matrix, skipped = encoder.encode_images(
        [source_path.parent / path for path, _ in pairs], job.batch_size
    )
    dropped = set(skipped)
    captions = [cap for row, (_, cap) in enumerate(pairs) if row not in dropped]
    text_matrix = encoder.encode_texts(captions, job.batch_size)

    texts_path = job.out_dir / "captions.txt"
    text_emb = job.out_dir / "cap_text.emb"
    image_emb = job.out_dir / "cap_img.emb"
    container.atomic_write_text(texts_path, "\n".join(captions) + "\n")
    container.write_container(text_matrix, text_emb)
    container.write_container(image_matrix, image_emb)
    print(f"captions: wrote {len(captions)} rows, {len(skipped)} skipped",
          file=sys.stderr)

    doc = container.load_manifest(job.manifest)
    doc["captions"] = {
        "texts": container.manifest_relative(texts_path, job.manifest),
        "text_features": container.manifest_relative(text_emb, job.manifest),
        "image_features": container.manifest_relative(image_emb, job.manifest),
    }
    container.save_manifest(doc, job.manifest)
    return {
        "texts": texts_path,
        "text_container": text_emb,
        "image_container": image_emb,
        "rows": len(captions),
        "skipped_rows": skipped,
        "manifest": job.manifest,
    }


def export_lexicon(job: ExportJob, words_path) -> dict:
    """Candidate-word embeddings for the adversarial search.

    Words are prompted through the first template, one row per non-blank
    line. The exact lines embedded are rewritten next to the container so
    the pair cannot drift apart.
    """
    words = [
        line.strip()
        for line in Path(words_path).read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]
    if not words:
        raise ExportError(f"{words_path}: no words")
    matrix = job.encoder().encode_texts(
        [job.templates[0].format(w) for w in words], job.batch_size
    )
    words_out = job.out_dir / "lexicon.txt"
    emb_out = job.out_dir / "lexicon.emb"
    container.atomic_write_text(words_out, "\n".join(words) + "\n")
    container.write_container(matrix, emb_out)
    print(f"lexicon: wrote {emb_out} ({len(words)} words)", file=sys.stderr)
    return {"words": words_out, "container": emb_out, "rows": len(words)}
