"""Encode datasets into the openness embedding container format.

One-shot batch inference over a pretrained CLIP-family checkpoint: image
embeddings with aligned labels, per-template class-text embeddings, caption
corpus triples, and adversarial lexicon embeddings. All output rows are
unit-normalized float32; every file format matches the evaluation package
byte for byte.
"""

__version__ = "0.1.0"

from .container import (  # noqa: F401
    container_bytes,
    labels_bytes,
    load_manifest,
    save_manifest,
    write_container,
    write_labels,
)
from .encoder import CheckpointEncoder, EncoderError  # noqa: F401
from .jobs import (  # noqa: F401
    DEFAULT_TEMPLATES,
    ExportError,
    ExportJob,
    export_caption_corpus,
    export_class_embeddings,
    export_image_embeddings,
    export_lexicon,
)
