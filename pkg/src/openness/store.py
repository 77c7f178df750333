"""Embedding containers, class catalogs, vocabularies, and dataset loading.

Binary container layout (little-endian):

    offset  size  field
    0       8     magic b"EMBV0001"
    8       8     u64 row count
    16      8     u64 feature dimension
    24      1     u8 normalized flag (0 or 1)
    25      7     reserved, must be zero
    32      -     rows * dim float32 values, row-major

Labels travel in a sibling file of one u32 per image row. A dataset manifest
is a JSON document tying containers, catalog, and vocabulary hierarchy
together; see docs/formats.md for the schema.
"""
from __future__ import annotations

import json
import struct
import unicodedata
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import (
    BadMagic,
    DataError,
    DatasetInvalid,
    DimMismatch,
    EmptyCorpus,
    EmptyVocabulary,
    InvalidShape,
    NonFiniteEntry,
    NotNormalized,
    TruncatedPayload,
    UnknownClass,
    ZeroNormRow,
)

MAGIC = b"EMBV0001"
_HEADER = struct.Struct("<8sQQB7x")
HEADER_SIZE = _HEADER.size  # 32 bytes

# Unit-norm tolerance for the `normalized` flag. Float32 storage keeps
# freshly normalized rows within ~1e-7; 1e-3 leaves room for upstream
# encoders that normalized in half precision.
NORM_ATOL = 1e-3


def normalize_name(name: str) -> str:
    """Canonical form for class-name comparison: Unicode NFC, then casefold."""
    return unicodedata.normalize("NFC", name).casefold()


@dataclass(frozen=True)
class EmbeddingMatrix:
    """Dense float32 feature matrix, immutable after construction.

    `normalized` asserts that every row already has unit Euclidean norm
    (within NORM_ATOL); it is never set implicitly.
    """

    data: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.dtype != np.float32:
            arr = arr.astype(np.float32)
        if arr.ndim != 2:
            raise InvalidShape(f"expected a 2-d matrix, got ndim={arr.ndim}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise InvalidShape(f"matrix must be at least 1x1, got {arr.shape}")
        if not np.isfinite(arr).all():
            bad = np.argwhere(~np.isfinite(arr))[0]
            raise NonFiniteEntry(f"non-finite value at row {bad[0]}, column {bad[1]}")
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        if self.normalized:
            norms = np.linalg.norm(arr.astype(np.float64), axis=1)
            worst = float(np.max(np.abs(norms - 1.0)))
            if worst > NORM_ATOL:
                raise NotNormalized(
                    f"normalized flag set but a row norm deviates from 1.0 by {worst:.3g}"
                )

    @property
    def rows(self) -> int:
        return int(self.data.shape[0])

    @property
    def dim(self) -> int:
        return int(self.data.shape[1])

    def row(self, i: int) -> np.ndarray:
        return self.data[i]

    def take(self, indices) -> np.ndarray:
        """Float64 view of selected rows, for downstream accumulation."""
        return self.data[np.asarray(indices, dtype=np.int64)].astype(np.float64)


def normalize_rows(matrix: EmbeddingMatrix) -> EmbeddingMatrix:
    """Divide every row by its Euclidean norm (computed in float64).

    Raises ZeroNormRow for an exactly-zero row. Idempotent up to float32
    rounding (re-normalizing moves no coordinate by more than 1e-6).
    """
    data = matrix.data.astype(np.float64)
    norms = np.linalg.norm(data, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise ZeroNormRow(int(zero[0]))
    out = (data / norms[:, None]).astype(np.float32)
    return EmbeddingMatrix(out, normalized=True)


def load_embedding_matrix(path) -> EmbeddingMatrix:
    """Read one container file; see the module docstring for the layout."""
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) or blob[: len(MAGIC)] != MAGIC:
        raise BadMagic(f"{path}: not an embedding container")
    if len(blob) < HEADER_SIZE:
        raise TruncatedPayload(f"{path}: header cut short at {len(blob)} bytes")
    _, rows, dim, flag = _HEADER.unpack_from(blob, 0)
    if rows < 1 or dim < 1:
        raise InvalidShape(f"{path}: header declares {rows}x{dim}")
    expected = rows * dim * 4
    payload = blob[HEADER_SIZE:]
    if len(payload) != expected:
        raise TruncatedPayload(
            f"{path}: payload is {len(payload)} bytes, header implies {expected}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(rows, dim)
    return EmbeddingMatrix(data, normalized=bool(flag))


def embedding_matrix_bytes(matrix: EmbeddingMatrix) -> bytes:
    header = _HEADER.pack(MAGIC, matrix.rows, matrix.dim, int(matrix.normalized))
    payload = np.ascontiguousarray(matrix.data, dtype="<f4").tobytes()
    return header + payload


def write_embedding_matrix(matrix: EmbeddingMatrix, path) -> None:
    """Write a container; load_embedding_matrix(path) round-trips bit-identically."""
    Path(path).write_bytes(embedding_matrix_bytes(matrix))


def load_labels(path, expected_rows: int | None = None) -> np.ndarray:
    """Read one u32 label per image row; returns int64."""
    blob = Path(path).read_bytes()
    if len(blob) % 4 != 0:
        raise TruncatedPayload(f"{path}: label file length {len(blob)} not a multiple of 4")
    labels = np.frombuffer(blob, dtype="<u4").astype(np.int64)
    if expected_rows is not None and labels.shape[0] != expected_rows:
        raise TruncatedPayload(
            f"{path}: {labels.shape[0]} labels for {expected_rows} image rows"
        )
    return labels


def write_labels(labels, path) -> None:
    arr = np.asarray(labels, dtype=np.int64)
    if arr.ndim != 1:
        raise InvalidShape("labels must be a flat array")
    if arr.size and (arr.min() < 0 or arr.max() > 0xFFFFFFFF):
        raise InvalidShape("labels must fit in u32")
    Path(path).write_bytes(arr.astype("<u4").tobytes())


@dataclass(frozen=True)
class ClassEntry:
    """One catalog row: stable id, display name, prompt, and text-matrix row."""

    class_id: int
    name: str
    prompt_text: str
    text_embedding: int

    def __post_init__(self):
        if not self.name:
            raise DataError("class name must be non-empty")


class ClassCatalog:
    """Ordered class entries with unique ids; resolves ids to rows and names."""

    def __init__(self, entries: Iterable[ClassEntry]):
        self.entries: tuple[ClassEntry, ...] = tuple(entries)
        self._by_id: dict[int, ClassEntry] = {}
        for entry in self.entries:
            if entry.class_id in self._by_id:
                raise DataError(f"duplicate class_id {entry.class_id} in catalog")
            self._by_id[entry.class_id] = entry
        self._by_name: dict[str, int] = {}
        for entry in self.entries:
            self._by_name.setdefault(normalize_name(entry.name), entry.class_id)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[ClassEntry]:
        return iter(self.entries)

    def __contains__(self, class_id: int) -> bool:
        return class_id in self._by_id

    @property
    def ids(self) -> tuple[int, ...]:
        return tuple(e.class_id for e in self.entries)

    def entry(self, class_id: int) -> ClassEntry:
        try:
            return self._by_id[class_id]
        except KeyError:
            raise UnknownClass(f"class_id {class_id} not in catalog") from None

    def rows_for(self, class_ids: Sequence[int]) -> np.ndarray:
        return np.array([self.entry(c).text_embedding for c in class_ids], dtype=np.int64)

    def id_for_name(self, name: str) -> int:
        key = normalize_name(name)
        if key not in self._by_name:
            raise UnknownClass(f"no class named {name!r} in catalog")
        return self._by_name[key]


@dataclass(frozen=True)
class Vocabulary:
    """An ordered set of candidate classes presented to the matcher.

    Order matters: argmax ties resolve to the earliest position.
    """

    label: str
    class_ids: tuple[int, ...]

    def __post_init__(self):
        ids = tuple(int(c) for c in self.class_ids)
        object.__setattr__(self, "class_ids", ids)
        if not ids:
            raise EmptyVocabulary(f"vocabulary {self.label!r} has no classes")
        if len(set(ids)) != len(ids):
            raise DataError(f"vocabulary {self.label!r} repeats a class_id")

    def __len__(self) -> int:
        return len(self.class_ids)


@dataclass(frozen=True)
class VocabularyHierarchy:
    """Vocabularies evaluated jointly by the expansion protocols.

    Overlap between member vocabularies is representable (so validation can
    report it as data) but rejected by the protocol entry points; route
    through dedup_hierarchy to repair it.
    """

    vocabularies: tuple[Vocabulary, ...]

    def __post_init__(self):
        object.__setattr__(self, "vocabularies", tuple(self.vocabularies))
        if not self.vocabularies:
            raise DataError("hierarchy must contain at least one vocabulary")

    def __len__(self) -> int:
        return len(self.vocabularies)

    def __iter__(self) -> Iterator[Vocabulary]:
        return iter(self.vocabularies)

    def __getitem__(self, i: int) -> Vocabulary:
        return self.vocabularies[i]

    def overlaps(self) -> list[tuple[str, str, int]]:
        """(label_a, label_b, class_id) for every pairwise repeat."""
        seen: dict[int, str] = {}
        out = []
        for vocab in self.vocabularies:
            for cid in vocab.class_ids:
                if cid in seen and seen[cid] != vocab.label:
                    out.append((seen[cid], vocab.label, cid))
                else:
                    seen.setdefault(cid, vocab.label)
        return out

    def all_class_ids(self) -> tuple[int, ...]:
        return dedup_union(self.vocabularies).class_ids


def dedup_union(vocabs: Sequence[Vocabulary]) -> Vocabulary:
    """Union of vocabularies keeping the first occurrence of each class.

    Presentation order is the concatenation order with later repeats dropped,
    which is exactly how cumulative expansion builds its candidate sets.
    """
    if not vocabs:
        raise DataError("cannot union zero vocabularies")
    seen: set[int] = set()
    ids: list[int] = []
    for vocab in vocabs:
        for cid in vocab.class_ids:
            if cid not in seen:
                seen.add(cid)
                ids.append(cid)
    label = "+".join(v.label for v in vocabs)
    return Vocabulary(label, tuple(ids))


def dedup_hierarchy(hierarchy: VocabularyHierarchy) -> VocabularyHierarchy:
    """Repair overlap by dropping classes already claimed by an earlier vocabulary.

    A vocabulary emptied entirely by the rule is removed.
    """
    seen: set[int] = set()
    kept: list[Vocabulary] = []
    for vocab in hierarchy:
        ids = tuple(c for c in vocab.class_ids if c not in seen)
        seen.update(vocab.class_ids)
        if ids:
            kept.append(Vocabulary(vocab.label, ids))
    return VocabularyHierarchy(tuple(kept))


@dataclass(frozen=True)
class LabeledImageSet:
    """Image embeddings plus one ground-truth class_id per row."""

    embeddings: EmbeddingMatrix
    labels: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.ndim != 1:
            raise InvalidShape("labels must be one-dimensional")
        if labels.shape[0] != self.embeddings.rows:
            raise InvalidShape(
                f"{labels.shape[0]} labels for {self.embeddings.rows} image rows"
            )
        labels = np.ascontiguousarray(labels)
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    @property
    def count(self) -> int:
        return self.embeddings.rows

    def restrict_to(self, class_ids: Iterable[int]) -> "LabeledImageSet":
        """The sub-collection whose labels fall inside the given classes."""
        wanted = np.isin(self.labels, np.fromiter(class_ids, dtype=np.int64))
        if not wanted.any():
            raise DataError("restriction produced an empty image set")
        sub = EmbeddingMatrix(self.embeddings.data[wanted], self.embeddings.normalized)
        return LabeledImageSet(sub, self.labels[wanted])


@dataclass(frozen=True)
class CaptionCorpus:
    """Caption strings with paired image-side and text-side embeddings.

    Retrieval queries run against the image side; ensembles are built from
    the text side. Row i of each part describes the same caption.
    """

    captions: tuple[str, ...]
    text_embeddings: EmbeddingMatrix
    image_embeddings: EmbeddingMatrix

    def __post_init__(self):
        object.__setattr__(self, "captions", tuple(self.captions))
        if not self.captions:
            raise EmptyCorpus("caption corpus has no rows")
        if len(self.captions) != self.text_embeddings.rows:
            raise InvalidShape(
                f"{len(self.captions)} captions but {self.text_embeddings.rows} text rows"
            )
        if len(self.captions) != self.image_embeddings.rows:
            raise InvalidShape(
                f"{len(self.captions)} captions but {self.image_embeddings.rows} image rows"
            )

    @property
    def rows(self) -> int:
        return len(self.captions)


@dataclass(frozen=True)
class Violation:
    """One dataset consistency problem. Violations are data, not exceptions."""

    kind: str
    detail: str

    def __str__(self) -> str:
        return f"{self.kind}: {self.detail}"


@dataclass(frozen=True)
class EvaluationDataset:
    """Everything one evaluation run needs, loaded and cross-linked."""

    catalog: ClassCatalog
    text_features: EmbeddingMatrix
    images: LabeledImageSet
    hierarchy: VocabularyHierarchy
    captions: CaptionCorpus | None = None
    source: str | None = None

    @property
    def n_vocabularies(self) -> int:
        return len(self.hierarchy)

    def full_vocabulary(self) -> Vocabulary:
        return dedup_union(list(self.hierarchy))


def validate_dataset(dataset: EvaluationDataset) -> list[Violation]:
    """Cross-check ids, rows, and dims. Returns problems instead of raising."""
    out: list[Violation] = []
    catalog = dataset.catalog
    n_text = dataset.text_features.rows

    for entry in catalog:
        if not 0 <= entry.text_embedding < n_text:
            out.append(
                Violation(
                    "RowIndexOutOfRange",
                    f"class {entry.class_id} ({entry.name!r}) points at text row "
                    f"{entry.text_embedding} of {n_text}",
                )
            )

    for vocab in dataset.hierarchy:
        for cid in vocab.class_ids:
            if cid not in catalog:
                out.append(
                    Violation(
                        "DanglingClassId",
                        f"vocabulary {vocab.label!r} references unknown class_id {cid}",
                    )
                )

    for label_a, label_b, cid in dataset.hierarchy.overlaps():
        out.append(
            Violation(
                "OverlappingVocabularies",
                f"class_id {cid} appears in both {label_a!r} and {label_b!r}",
            )
        )

    unknown = sorted(set(int(c) for c in dataset.images.labels) - set(catalog.ids))
    for cid in unknown:
        out.append(
            Violation("DanglingClassId", f"image label {cid} not present in catalog")
        )

    if dataset.images.embeddings.dim != dataset.text_features.dim:
        out.append(
            Violation(
                "DimMismatch",
                f"image dim {dataset.images.embeddings.dim} != text dim "
                f"{dataset.text_features.dim}",
            )
        )

    if dataset.captions is not None:
        if dataset.captions.image_embeddings.dim != dataset.images.embeddings.dim:
            out.append(
                Violation(
                    "DimMismatch",
                    f"caption image dim {dataset.captions.image_embeddings.dim} != "
                    f"image dim {dataset.images.embeddings.dim}",
                )
            )
        if dataset.captions.text_embeddings.dim != dataset.text_features.dim:
            out.append(
                Violation(
                    "DimMismatch",
                    f"caption text dim {dataset.captions.text_embeddings.dim} != "
                    f"text dim {dataset.text_features.dim}",
                )
            )

    return out


def _resolve(base: Path, rel: str) -> Path:
    p = Path(rel)
    return p if p.is_absolute() else base / p


def load_caption_corpus(spec: dict, base: Path) -> CaptionCorpus:
    """Load the optional captions section of a manifest."""
    for key in ("texts", "text_features", "image_features"):
        if key not in spec:
            raise DataError(f"captions section missing {key!r}")
    text_path = _resolve(base, spec["texts"])
    captions = text_path.read_text(encoding="utf-8").splitlines()
    if not captions:
        raise EmptyCorpus(f"{text_path}: empty caption file")
    return CaptionCorpus(
        captions=tuple(captions),
        text_embeddings=load_embedding_matrix(_resolve(base, spec["text_features"])),
        image_embeddings=load_embedding_matrix(_resolve(base, spec["image_features"])),
    )


def load_dataset(
    manifest_path,
    *,
    require_valid: bool = True,
    dedup: bool = False,
    with_captions: bool = True,
) -> EvaluationDataset:
    """Load a dataset manifest and the containers it references.

    With require_valid (the default), any Violation raises DatasetInvalid;
    pass require_valid=False to obtain the dataset for inspection. dedup
    routes the hierarchy through dedup_hierarchy before validation.
    """
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    doc = json.loads(manifest_path.read_text(encoding="utf-8"))
    if doc.get("version") != 1:
        raise DataError(f"{manifest_path}: unsupported manifest version {doc.get('version')!r}")
    for key in ("text_features", "image_features", "labels", "catalog", "hierarchy"):
        if key not in doc:
            raise DataError(f"{manifest_path}: manifest missing {key!r}")

    texts = load_embedding_matrix(_resolve(base, doc["text_features"]))
    image_matrix = load_embedding_matrix(_resolve(base, doc["image_features"]))
    labels = load_labels(_resolve(base, doc["labels"]), image_matrix.rows)

    entries = []
    for row, item in enumerate(doc["catalog"]):
        entries.append(
            ClassEntry(
                class_id=int(item["id"]),
                name=str(item["name"]),
                prompt_text=str(item.get("prompt", item["name"])),
                text_embedding=int(item.get("row", row)),
            )
        )
    catalog = ClassCatalog(entries)

    vocabularies = []
    for item in doc["hierarchy"]:
        vocabularies.append(
            Vocabulary(str(item["label"]), tuple(int(c) for c in item["class_ids"]))
        )
    hierarchy = VocabularyHierarchy(tuple(vocabularies))
    if dedup:
        hierarchy = dedup_hierarchy(hierarchy)

    captions = None
    if with_captions and "captions" in doc and doc["captions"]:
        captions = load_caption_corpus(doc["captions"], base)

    dataset = EvaluationDataset(
        catalog=catalog,
        text_features=texts,
        images=LabeledImageSet(image_matrix, labels),
        hierarchy=hierarchy,
        captions=captions,
        source=str(manifest_path),
    )
    if require_valid:
        violations = validate_dataset(dataset)
        if violations:
            raise DatasetInvalid(violations)
    return dataset


# ---------------------------------------------------------------------------
# Shipped vocabulary hierarchies (superclass -> member class names).

SHIPPED_HIERARCHIES = ("cifar100", "entity13", "living17")


def shipped_hierarchy(name: str) -> list[dict]:
    """Load one of the packaged hierarchy fragments by dataset name."""
    if name not in SHIPPED_HIERARCHIES:
        raise DataError(f"no shipped hierarchy named {name!r}; have {SHIPPED_HIERARCHIES}")
    text = resources.files("openness.data").joinpath(f"{name}_hierarchy.json").read_text("utf-8")
    return json.loads(text)["vocabularies"]


def hierarchy_from_names(
    fragment: Sequence[dict], catalog: ClassCatalog
) -> VocabularyHierarchy:
    """Resolve a name-based hierarchy fragment against a catalog.

    Names match case-insensitively after NFC normalization; a miss raises
    UnknownClass.
    """
    vocabs = []
    for item in fragment:
        ids = tuple(catalog.id_for_name(n) for n in item["classes"])
        vocabs.append(Vocabulary(str(item["label"]), ids))
    return VocabularyHierarchy(tuple(vocabs))
