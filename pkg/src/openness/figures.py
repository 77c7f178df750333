"""Render emitted reports to matplotlib figures on disk.

Figure rendering is strictly additive: the evaluation subcommands emit the
same JSON/CSV payload with or without it, and `openness render` turns an
already-written report file into figures after the fact.
"""
from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

DPI = 150


def _save(fig, out_dir: Path, name: str) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{name}.png"
    fig.savefig(path, dpi=DPI, bbox_inches="tight")
    plt.close(fig)
    return path


def _curve_figure(curves: dict, acc_c: float | None):
    fig, ax = plt.subplots(figsize=(6, 4))
    for metric, steps in sorted(curves.items()):
        xs = [s["step"] for s in steps]
        ys = [100.0 * s["accuracy"] for s in steps]
        ax.plot(xs, ys, marker="o", markersize=3, label=metric)
    if acc_c is not None:
        ax.axhline(100.0 * acc_c, color="gray", linestyle="--", linewidth=1, label="closed")
    ax.set_xlabel("expansion step")
    ax.set_ylabel("accuracy (%)")
    ax.set_title("accuracy under vocabulary expansion")
    ax.legend()
    ax.grid(alpha=0.3)
    return fig


def _histogram_figure(hist: dict):
    edges = np.asarray(hist["bin_edges"])
    counts = np.asarray(hist["counts"])
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(edges[:-1], counts, width=np.diff(edges), align="edge", color="#4878b0")
    ax.axvline(hist["median"], color="crimson", linewidth=1.2,
               label=f"median {hist['median']:.4f}")
    ax.set_xlabel("margin")
    ax.set_ylabel("images")
    ax.set_title("margin distribution")
    ax.legend()
    return fig


def _grid_figure(grid: dict):
    values = np.asarray(grid["values"])
    fig, ax = plt.subplots(figsize=(5.5, 5))
    im = ax.imshow(values, cmap="viridis")
    ax.set_xlabel("class text")
    ax.set_ylabel("sampled image class")
    ax.set_title("class similarity grid")
    fig.colorbar(im, ax=ax, fraction=0.046)
    return fig


def _adversarial_figure(results: dict):
    words = [s["word"] for s in results["selected"]]
    accs = [100.0 * s["single_word_accuracy"] for s in results["selected"]]
    fig, ax = plt.subplots(figsize=(6, 0.5 * max(4, len(words))))
    ax.barh(range(len(words)), accs, color="#b04848")
    ax.set_yticks(range(len(words)), words)
    ax.invert_yaxis()
    ax.axvline(100.0 * results["combined_conditional_accuracy"], color="black",
               linewidth=1.2, label="combined")
    ax.set_xlabel("conditional accuracy (%)")
    ax.set_title(f"adversarial words vs {results['target']!r}")
    ax.legend()
    return fig


def render_results(results: dict, out_dir, stem: str) -> list[Path]:
    """Write every figure the payload supports; returns the files created."""
    out_dir = Path(out_dir)
    written: list[Path] = []
    curves = results.get("curves")
    if curves:
        written.append(_save(_curve_figure(curves, results.get("acc_c")), out_dir, f"{stem}_curves"))
    hist = results.get("margin_histogram")
    if hist:
        written.append(_save(_histogram_figure(hist), out_dir, f"{stem}_margins"))
    grid = results.get("class_similarity_grid")
    if grid:
        written.append(_save(_grid_figure(grid), out_dir, f"{stem}_grid"))
    if "selected" in results and "combined_conditional_accuracy" in results:
        written.append(_save(_adversarial_figure(results), out_dir, f"{stem}_adversarial"))
    shift = results.get("margin_shift")
    if shift:
        for key in ("before", "after"):
            fig = _histogram_figure(shift[key])
            written.append(_save(fig, out_dir, f"{stem}_margins_{key}"))
    return written


def render_report_file(report_path, out_dir) -> list[Path]:
    """Render a previously written report bundle to figures."""
    report_path = Path(report_path)
    bundle = json.loads(report_path.read_text(encoding="utf-8"))
    results = bundle.get("results", bundle)
    return render_results(results, out_dir, report_path.stem)
