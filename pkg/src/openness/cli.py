"""Command-line interface.

Exit codes: 0 success, 1 data problem (bad containers, failed validation),
2 usage error. Reports land atomically (temp file + rename) and embed the
tool version plus the exact configuration needed to reproduce them; progress
and timing go to stderr only, so report bytes depend on nothing but the
inputs, the seed, and the requested computation. Worker threads never change
output bytes.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
import tempfile
import time
from pathlib import Path

from . import __version__, adversarial, figures, geometry, protocol, repe, store
from .errors import DataError, OpennessError

PROG = "openness"


class UsageError(Exception):
    pass


def _atomic_write_bytes(path, blob: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _atomic_write_text(path, text: str) -> None:
    _atomic_write_bytes(path, text.encode("utf-8"))


def _bundle_text(command: str, config: dict, results: dict) -> str:
    bundle = {
        "tool": {"name": PROG, "version": __version__},
        "config": {"command": command, **config},
        "results": results,
    }
    return json.dumps(bundle, indent=2, sort_keys=True) + "\n"


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _emit(args, command: str, config: dict, results: dict, csv_payload=None) -> None:
    """Write the report in the requested format(s), then optional figures."""
    out = Path(args.out)
    fmt = getattr(args, "format", "json")
    if fmt in ("json", "both"):
        _atomic_write_text(out, _bundle_text(command, config, results))
        print(f"{command}: wrote {out}", file=sys.stderr)
    if fmt in ("csv", "both") and csv_payload is not None:
        csv_path = out.with_suffix(".csv")
        _atomic_write_text(csv_path, _csv_text(*csv_payload))
        print(f"{command}: wrote {csv_path}", file=sys.stderr)
    figure_dir = getattr(args, "figures", None)
    if figure_dir:
        written = figures.render_results(results, figure_dir, out.stem)
        for p in written:
            print(f"{command}: wrote {p}", file=sys.stderr)


def _threads(args) -> int:
    value = getattr(args, "threads", None)
    if value is None:
        env = os.environ.get("OPENNESS_THREADS", "").strip()
        if not env:
            return 1
        try:
            value = int(env)
        except ValueError:
            raise UsageError(f"OPENNESS_THREADS={env!r} is not an integer") from None
    if value < 1:
        raise UsageError("thread count must be at least 1")
    return value


def _load_dataset(args, require_valid: bool = True):
    return store.load_dataset(
        args.manifest,
        require_valid=require_valid,
        dedup=getattr(args, "dedup", False),
    )


def _resolve_target(dataset, spec: str) -> int:
    """A target vocabulary given as an index or as its label."""
    labels = [v.label for v in dataset.hierarchy]
    try:
        idx = int(spec)
    except ValueError:
        matches = [i for i, l in enumerate(labels) if store.normalize_name(l) == store.normalize_name(spec)]
        if not matches:
            raise DataError(f"no vocabulary labelled {spec!r}; have {labels}") from None
        return matches[0]
    if not 0 <= idx < len(labels):
        raise DataError(f"target index {idx} outside 0..{len(labels) - 1}")
    return idx


# ---------------------------------------------------------------------- commands

def _cmd_validate(args) -> int:
    dataset = _load_dataset(args, require_valid=False)
    violations = store.validate_dataset(dataset)
    payload = {
        "violations": [{"kind": v.kind, "detail": v.detail} for v in violations],
        "count": len(violations),
    }
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if args.out:
        _atomic_write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return 1 if violations else 0


def _cmd_eval_closed(args) -> int:
    dataset = _load_dataset(args)
    per_vocab = protocol.per_vocabulary_accuracy(dataset)
    report = protocol.ProtocolReport(
        acc_c=protocol.kahan_mean(per_vocab), per_vocabulary=tuple(per_vocab)
    )
    results = report.as_dict()
    results["per_vocabulary_labels"] = [v.label for v in dataset.hierarchy]
    config = {"manifest": str(args.manifest), "dedup": args.dedup, "format": args.format}
    rows = [
        ("closed", i + 1, float(len(v)), acc)
        for i, (v, acc) in enumerate(zip(dataset.hierarchy, per_vocab))
    ]
    _emit(args, "eval-closed", config, results, (("metric", "step", "vocab_size", "accuracy"), rows))
    return 0


def _cmd_eval_extensibility(args) -> int:
    dataset = _load_dataset(args)
    threads = _threads(args)
    config = protocol.SamplerConfig(
        seed=args.seed, sample_count=args.samples, exact_threshold=args.exact_threshold
    )
    started = time.perf_counter()
    if args.exact:
        ext = protocol.extensibility_enumerated(dataset, args.exact_threshold)
    else:
        ext = protocol.extensibility(dataset, config, threads=threads)
    per_vocab = protocol.per_vocabulary_accuracy(dataset)
    report = protocol.ProtocolReport(
        acc_c=protocol.kahan_mean(per_vocab),
        per_vocabulary=tuple(per_vocab),
        extensibility=ext,
        seed=args.seed,
    )
    elapsed = time.perf_counter() - started
    print(f"eval-extensibility: {ext.samples} orderings in {elapsed:.2f}s", file=sys.stderr)
    echo = {
        "manifest": str(args.manifest),
        "seed": args.seed,
        "samples": ext.samples if not args.exact else None,
        "exact": args.exact,
        "exact_threshold": args.exact_threshold,
        "dedup": args.dedup,
        "format": args.format,
    }
    _emit(
        args,
        "eval-extensibility",
        echo,
        report.as_dict(),
        (("metric", "step", "vocab_size", "accuracy"), report.curve_rows()),
    )
    return 0


def _cmd_eval_stability(args) -> int:
    dataset = _load_dataset(args)
    threads = _threads(args)
    config = protocol.SamplerConfig(seed=args.seed, sample_count=args.samples)
    started = time.perf_counter()
    per_vocab = protocol.per_vocabulary_accuracy(dataset)
    acc_c = protocol.kahan_mean(per_vocab)
    echo = {
        "manifest": str(args.manifest),
        "seed": args.seed,
        "samples": args.samples,
        "target": args.target,
        "dedup": args.dedup,
        "format": args.format,
    }
    if args.target is not None:
        idx = _resolve_target(dataset, args.target)
        local = protocol.local_stability(dataset, idx, config, threads=threads)
        results = {
            "acc_c": acc_c,
            "target": local.target_label,
            "target_index": local.target_index,
            "closed_accuracy": local.closed_accuracy,
            "acc_s_tilde": local.acc_s_tilde,
            "samples": local.samples,
            "seed": args.seed,
            "curves": {"stability": local.curve.as_dict()},
        }
        rows = [("stability", s.step, s.vocab_size, s.accuracy) for s in local.curve.steps]
    else:
        general = protocol.general_stability(dataset, config, threads=threads)
        report = protocol.ProtocolReport(
            acc_c=acc_c,
            per_vocabulary=tuple(per_vocab),
            stability=general,
            seed=args.seed,
        )
        results = report.as_dict()
        rows = report.curve_rows()
    elapsed = time.perf_counter() - started
    print(f"eval-stability: finished in {elapsed:.2f}s", file=sys.stderr)
    _emit(args, "eval-stability", echo, results, (("metric", "step", "vocab_size", "accuracy"), rows))
    return 0


def _cmd_adversarial(args) -> int:
    dataset = _load_dataset(args)
    idx = _resolve_target(dataset, args.target)
    target = dataset.hierarchy[idx]
    lexicon = adversarial.load_lexicon(args.lexicon, args.lexicon_embeddings)
    lexicon = adversarial.exclude_target_names(lexicon, target, dataset.catalog)
    images = dataset.images.restrict_to(target.class_ids)
    result = adversarial.build_adversarial_vocabulary(
        images,
        target,
        lexicon,
        args.size,
        args.strategy,
        texts=dataset.text_features,
        catalog=dataset.catalog,
        exhaustive_budget=args.exhaustive_budget,
    )
    echo = {
        "manifest": str(args.manifest),
        "target": args.target,
        "lexicon": str(args.lexicon),
        "lexicon_embeddings": str(args.lexicon_embeddings),
        "size": args.size,
        "strategy": args.strategy,
        "exhaustive_budget": args.exhaustive_budget,
        "dedup": args.dedup,
        "format": args.format,
    }
    rows = [(w, acc) for w, acc in result.selected]
    _emit(args, "adversarial", echo, result.as_dict(), (("word", "single_word_accuracy"), rows))
    return 0


def _cmd_geometry(args) -> int:
    dataset = _load_dataset(args)
    grid_ids = None
    if args.grid_classes:
        if args.grid_classes == "all":
            grid_ids = list(dataset.catalog.ids)
        else:
            grid_ids = [int(x) for x in args.grid_classes.split(",") if x.strip()]
    report = geometry.geometry_report(
        dataset,
        bins=args.bins,
        grid_class_ids=grid_ids,
        samples_per_class=args.samples_per_class,
        seed=args.seed,
    )
    echo = {
        "manifest": str(args.manifest),
        "bins": args.bins,
        "grid_classes": args.grid_classes,
        "samples_per_class": args.samples_per_class,
        "seed": args.seed,
        "dedup": args.dedup,
        "format": args.format,
    }
    results = report.as_dict()
    hist = report.margin_histogram
    rows = [
        (hist.bin_edges[i], hist.bin_edges[i + 1], hist.counts[i])
        for i in range(len(hist.counts))
    ]
    _emit(args, "geometry", echo, results, (("bin_left", "bin_right", "count"), rows))
    if report.grid is not None and args.format in ("csv", "both"):
        grid_path = Path(args.out).with_suffix("").as_posix() + "_grid.csv"
        header = ["image_class"] + [str(c) for c in report.grid_class_ids]
        grid_rows = [
            [str(cid)] + [repr(v) for v in row]
            for cid, row in zip(report.grid_class_ids, report.grid)
        ]
        _atomic_write_text(grid_path, _csv_text(header, grid_rows))
        print(f"geometry: wrote {grid_path}", file=sys.stderr)
    return 0


def _cmd_repe_build(args) -> int:
    manifest = Path(args.manifest)
    doc = json.loads(manifest.read_text(encoding="utf-8"))
    if "captions" not in doc or not doc["captions"]:
        raise DataError(f"{manifest}: manifest has no captions section")
    spec = doc["captions"]
    corpus = store.load_caption_corpus(spec, manifest.parent)

    def digest(rel):
        p = Path(rel)
        p = p if p.is_absolute() else manifest.parent / p
        return hashlib.sha256(p.read_bytes()).hexdigest()

    results = {
        "rows": corpus.rows,
        "text_dim": corpus.text_embeddings.dim,
        "image_dim": corpus.image_embeddings.dim,
        "files": {key: spec[key] for key in ("texts", "text_features", "image_features")},
        "sha256": {key: digest(spec[key]) for key in ("texts", "text_features", "image_features")},
    }
    echo = {"manifest": str(args.manifest), "format": args.format}
    _emit(args, "repe-build", echo, results, None)
    return 0


def _cmd_repe_enhance(args) -> int:
    dataset = store.load_dataset(args.manifest, dedup=args.dedup)
    if dataset.captions is None:
        raise DataError(f"{args.manifest}: manifest has no captions section")
    config = repe.RepeConfig(k=args.k, candidate_pool=args.pool, blend=args.blend)
    started = time.perf_counter()
    enhanced, audits = repe.repe_enhance_catalog(dataset, dataset.captions, config)
    elapsed = time.perf_counter() - started
    print(f"repe-enhance: {len(audits)} classes in {elapsed:.2f}s", file=sys.stderr)

    container = Path(args.out_container)
    _atomic_write_bytes(container, store.embedding_matrix_bytes(enhanced))
    print(f"repe-enhance: wrote {container}", file=sys.stderr)

    shift = repe.margin_shift(dataset, enhanced, bins=args.margin_bins)
    results = {
        "k": config.k,
        "candidate_pool": config.candidate_pool,
        "blend": config.blend,
        "enhanced_container": str(container),
        "classes": [a.as_dict() for a in audits],
        "underfilled_classes": sum(1 for a in audits if a.underfilled),
        "margin_shift": {
            "before": shift["before"].as_dict(),
            "after": shift["after"].as_dict(),
            "median_shift": shift["median_shift"],
        },
    }
    echo = {
        "manifest": str(args.manifest),
        "k": args.k,
        "pool": args.pool,
        "blend": args.blend,
        "margin_bins": args.margin_bins,
        "out_container": str(args.out_container),
        "dedup": args.dedup,
        "format": args.format,
    }
    _emit(args, "repe-enhance", echo, results, None)

    if args.out_manifest:
        doc = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
        out_manifest = Path(args.out_manifest)
        try:
            rel = container.relative_to(out_manifest.parent)
            doc["text_features"] = rel.as_posix()
        except ValueError:
            doc["text_features"] = str(container.resolve())
        base = Path(args.manifest).parent.resolve()
        for key in ("image_features", "labels"):
            p = Path(doc[key])
            if not p.is_absolute():
                doc[key] = str((base / p).resolve())
        if "captions" in doc and doc["captions"]:
            for key, val in list(doc["captions"].items()):
                p = Path(val)
                if not p.is_absolute():
                    doc["captions"][key] = str((base / p).resolve())
        _atomic_write_text(out_manifest, json.dumps(doc, indent=2, sort_keys=True) + "\n")
        print(f"repe-enhance: wrote {out_manifest}", file=sys.stderr)
    return 0


def _cmd_render(args) -> int:
    written = figures.render_report_file(args.report, args.out_dir)
    if not written:
        print("render: report contains nothing figurable", file=sys.stderr)
        return 1
    for p in written:
        print(f"render: wrote {p}", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------- parser

def _add_common(sub, figures_flag: bool = True):
    sub.add_argument("--manifest", required=True, help="dataset manifest JSON")
    sub.add_argument("--out", required=True, help="report output path")
    sub.add_argument("--format", choices=("json", "csv", "both"), default="json")
    sub.add_argument("--dedup", action="store_true",
                     help="repair overlapping vocabularies at load (first occurrence wins)")
    if figures_flag:
        sub.add_argument("--figures", default=None, metavar="DIR",
                         help="also render figures into DIR")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog=PROG,
        description="Openness evaluation for vision-language matchers, "
                    "from precomputed embeddings.",
    )
    parser.add_argument("--version", action="version", version=f"{PROG} {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)

    sub = commands.add_parser("validate", help="check a dataset manifest for consistency")
    sub.add_argument("--manifest", required=True)
    sub.add_argument("--dedup", action="store_true")
    sub.add_argument("--out", default=None, help="write the violation list here instead of stdout")
    sub.set_defaults(func=_cmd_validate)

    sub = commands.add_parser("eval-closed", help="closed accuracy per vocabulary")
    _add_common(sub)
    sub.set_defaults(func=_cmd_eval_closed)

    sub = commands.add_parser("eval-extensibility",
                              help="accuracy under sampled cumulative vocabulary unions")
    _add_common(sub)
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--samples", type=int, default=None,
                     help="permutation samples (default: 100 x vocabulary count)")
    sub.add_argument("--exact", action="store_true",
                     help="enumerate all orderings instead of sampling")
    sub.add_argument("--exact-threshold", type=int, default=6)
    sub.add_argument("--threads", type=int, default=None,
                     help="worker threads (or OPENNESS_THREADS); never changes results")
    sub.set_defaults(func=_cmd_eval_extensibility)

    sub = commands.add_parser("eval-stability",
                              help="conditional accuracy under sampled distractor unions")
    _add_common(sub)
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--samples", type=int, default=None,
                     help="permutation samples per target (default 100)")
    sub.add_argument("--target", default=None,
                     help="vocabulary label or index; omit to average over all targets")
    sub.add_argument("--threads", type=int, default=None)
    sub.set_defaults(func=_cmd_eval_stability)

    sub = commands.add_parser("adversarial",
                              help="search a lexicon for damaging distractor words")
    _add_common(sub)
    sub.add_argument("--target", required=True, help="vocabulary label or index")
    sub.add_argument("--lexicon", required=True, help="candidate words, one per line")
    sub.add_argument("--lexicon-embeddings", required=True,
                     help="embedding container matching the lexicon rows")
    sub.add_argument("--size", type=int, default=3)
    sub.add_argument("--strategy", choices=adversarial.STRATEGIES, default="top_k_individual")
    sub.add_argument("--exhaustive-budget", type=int, default=adversarial.EXHAUSTIVE_BUDGET)
    sub.set_defaults(func=_cmd_adversarial)

    sub = commands.add_parser("geometry",
                              help="alignment, uniformity, margins, class similarity grid")
    _add_common(sub)
    sub.add_argument("--bins", type=int, default=200)
    sub.add_argument("--grid-classes", default=None,
                     help="comma-separated class ids, or 'all'")
    sub.add_argument("--samples-per-class", type=int, default=100)
    sub.add_argument("--seed", type=int, default=0)
    sub.set_defaults(func=_cmd_geometry)

    sub = commands.add_parser("repe-build",
                              help="verify a caption corpus and fingerprint its files")
    sub.add_argument("--manifest", required=True)
    sub.add_argument("--out", required=True)
    sub.add_argument("--format", choices=("json", "csv", "both"), default="json")
    sub.set_defaults(func=_cmd_repe_build)

    sub = commands.add_parser("repe-enhance",
                              help="retrieval-enhanced class embeddings plus audit")
    sub.add_argument("--manifest", required=True)
    sub.add_argument("--out", required=True, help="audit report path")
    sub.add_argument("--out-container", required=True, help="enhanced text container path")
    sub.add_argument("--out-manifest", default=None,
                     help="also write a manifest pointing at the enhanced container")
    sub.add_argument("--k", type=int, default=100)
    sub.add_argument("--pool", type=int, default=1000)
    sub.add_argument("--blend", type=float, default=0.25)
    sub.add_argument("--margin-bins", type=int, default=200)
    sub.add_argument("--format", choices=("json", "csv", "both"), default="json")
    sub.add_argument("--dedup", action="store_true")
    sub.add_argument("--figures", default=None, metavar="DIR",
                     help="render before/after margin histograms into DIR")
    sub.set_defaults(func=_cmd_repe_enhance)

    sub = commands.add_parser("render", help="render an emitted report to figures")
    sub.add_argument("--report", required=True)
    sub.add_argument("--out-dir", required=True)
    sub.set_defaults(func=_cmd_render)

    return parser


def replay_argv(report_path, out_path) -> list[str]:
    """Rebuild the argv that reproduces a report, bit for bit."""
    bundle = json.loads(Path(report_path).read_text(encoding="utf-8"))
    config = bundle["config"]
    argv = [config["command"]]
    for key in sorted(config):
        if key == "command":
            continue
        value = config[key]
        if value is None or value is False:
            continue
        flag = "--" + key.replace("_", "-")
        if value is True:
            argv.append(flag)
        else:
            argv.extend([flag, str(value)])
    argv.extend(["--out", str(out_path)])
    return argv


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"{PROG}: {exc}", file=sys.stderr)
        return 2
    except OpennessError as exc:
        print(f"{PROG}: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"{PROG}: {exc}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
