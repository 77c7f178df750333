"""openness-export: encode data into the evaluation container format."""
from __future__ import annotations

import argparse
import sys

from .encoder import EncoderError
from .jobs import (
    DEFAULT_TEMPLATES,
    ExportError,
    ExportJob,
    export_caption_corpus,
    export_class_embeddings,
    export_image_embeddings,
    export_lexicon,
)

PROG = "openness-export"


def _add_common(sub):
    sub.add_argument("--model", required=True,
                     help="checkpoint id or local directory (CLIP family)")
    sub.add_argument("--out", required=True, help="output directory")
    sub.add_argument("--manifest", default=None,
                     help="manifest to create or update (default: OUT/manifest.json)")
    sub.add_argument("--batch-size", type=int, default=32)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog=PROG,
        description="Encode images, class prompts, captions, and lexicons "
                    "into the openness embedding containers.",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    sub = commands.add_parser("classes", help="class-text embeddings from a hierarchy")
    _add_common(sub)
    sub.add_argument("--hierarchy", required=True,
                     help="JSON list of {label, classes:[names]}")
    sub.add_argument("--template", action="append", default=None,
                     help="prompt with one {} slot; repeat for an ensemble "
                          f"(default: {DEFAULT_TEMPLATES[0]!r})")
    sub.set_defaults(kind="classes")

    sub = commands.add_parser("images", help="image embeddings plus aligned labels")
    _add_common(sub)
    sub.add_argument("--images-dir", required=True)
    sub.add_argument("--index", required=True,
                     help="CSV with file,class columns, one image per row")
    sub.set_defaults(kind="images")

    sub = commands.add_parser("captions", help="caption corpus triple for retrieval")
    _add_common(sub)
    sub.add_argument("--source", required=True,
                     help="lines of 'image<TAB>caption', images relative to it")
    sub.set_defaults(kind="captions")

    sub = commands.add_parser("lexicon", help="candidate-word embeddings")
    _add_common(sub)
    sub.add_argument("--words", required=True, help="one word per line")
    sub.add_argument("--template", action="append", default=None)
    sub.set_defaults(kind="lexicon")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 2

    templates = tuple(args.template) if getattr(args, "template", None) else DEFAULT_TEMPLATES
    try:
        job = ExportJob(
            model=args.model,
            out_dir=args.out,
            templates=templates,
            batch_size=args.batch_size,
            manifest=args.manifest,
        )
        if args.kind == "classes":
            export_class_embeddings(job, args.hierarchy)
        elif args.kind == "images":
            export_image_embeddings(job, args.images_dir, args.index)
        elif args.kind == "captions":
            export_caption_corpus(job, args.source)
        else:
            export_lexicon(job, args.words)
    except (ExportError, EncoderError, OSError, ValueError) as exc:
        print(f"{PROG}: error: {exc}", file=sys.stderr)
        return 1
    return 0


def entrypoint() -> None:
    raise SystemExit(main())
