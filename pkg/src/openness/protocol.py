"""Vocabulary-expansion protocols: closed accuracy, extensibility, stability.

Expansion order is averaged out by Monte-Carlo permutation sampling (or exact
enumeration when the vocabulary count is small). Determinism contract:
permutation j is a pure function of (seed, stream, j), per-permutation values
are reduced with compensated summation in index order, and worker threads only
change wall-clock time, never a single bit of the result.
"""
from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from . import matcher
from ._sampling import (
    STREAM_EXTENSIBILITY,
    STREAM_STABILITY_BASE,
    permutation_at,
)
from .errors import DataError, TooManyVocabularies
from .store import EvaluationDataset, Vocabulary


@dataclass(frozen=True)
class SamplerConfig:
    """Knobs for the permutation estimators.

    sample_count None picks the protocol default: 100 times the vocabulary
    count for extensibility, 100 for stability. Exact enumeration is used
    instead of sampling only where explicitly requested, guarded by
    exact_threshold (largest N whose N! fits the budget).
    """

    seed: int
    sample_count: int | None = None
    exact_threshold: int = 6

    def __post_init__(self):
        if self.sample_count is not None and self.sample_count < 1:
            raise DataError("sample_count must be at least 1")
        if self.exact_threshold < 1:
            raise DataError("exact_threshold must be at least 1")


def kahan_mean(values: Iterable[float]) -> float:
    """Compensated mean, accumulated in the order given."""
    total = 0.0
    comp = 0.0
    count = 0
    for v in values:
        count += 1
        y = float(v) - comp
        t = total + y
        comp = (t - total) - y
        total = t
    if count == 0:
        raise DataError("mean of zero values")
    return total / count


def kahan_column_means(rows: Sequence[np.ndarray]) -> np.ndarray:
    """Compensated per-column mean over equally shaped rows, in index order."""
    if not rows:
        raise DataError("mean of zero rows")
    total = np.zeros_like(rows[0], dtype=np.float64)
    comp = np.zeros_like(total)
    for r in rows:
        y = r - comp
        t = total + y
        comp = (t - total) - y
        total = t
    return total / len(rows)


def sample_permutations(n: int, config: SamplerConfig, count: int, stream: int = 0):
    """Yield `count` independent permutations of range(n).

    Sampling is with replacement across indices: permutation j depends only
    on (seed, stream, j), so consumers may evaluate any subset in any order.
    """
    for j in range(count):
        yield permutation_at(n, config.seed, j, stream)


def _ordered_map(fn: Callable[[int], object], count: int, threads: int) -> list:
    """fn over range(count), results in index order regardless of threads."""
    if threads <= 1:
        return [fn(j) for j in range(count)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, range(count)))


@dataclass(frozen=True)
class CurveStep:
    step: int
    vocab_size: float
    accuracy: float

    def as_dict(self) -> dict:
        return {"step": self.step, "vocab_size": self.vocab_size, "accuracy": self.accuracy}


@dataclass(frozen=True)
class ExpansionCurve:
    """Accuracy after each cumulative vocabulary union, averaged over orders."""

    steps: tuple[CurveStep, ...]

    def accuracies(self) -> list[float]:
        return [s.accuracy for s in self.steps]

    def as_dict(self) -> list[dict]:
        return [s.as_dict() for s in self.steps]


@dataclass(frozen=True)
class ExtensibilityResult:
    acc_e: float
    curve: ExpansionCurve
    samples: int
    exact: bool


@dataclass(frozen=True)
class LocalStabilityResult:
    target_index: int
    target_label: str
    closed_accuracy: float
    acc_s_tilde: float
    curve: ExpansionCurve
    samples: int


@dataclass(frozen=True)
class GeneralStabilityResult:
    acc_s: float
    locals: tuple[LocalStabilityResult, ...]
    mean_curve: ExpansionCurve


class _VocabBlocks:
    """Per-image best score and winner inside each vocabulary.

    Within one vocabulary the class order is fixed, so the within-vocabulary
    winner (earliest position on ties) never depends on the expansion order.
    Unions then reduce to combining per-vocabulary maxima: an image is
    classified correctly iff its own vocabulary wins the running maximum
    (strict inequality, so earlier-presented vocabularies keep ties) and the
    within-vocabulary winner is the true label.
    """

    def __init__(self, dataset: EvaluationDataset):
        hierarchy = dataset.hierarchy
        catalog = dataset.catalog
        n_vocab = len(hierarchy)

        vocab_of: dict[int, int] = {}
        for v, vocab in enumerate(hierarchy):
            for cid in vocab.class_ids:
                if cid in vocab_of:
                    raise DataError(
                        f"class_id {cid} appears in more than one vocabulary; "
                        "repair with dedup_hierarchy first"
                    )
                vocab_of[cid] = v

        labels = dataset.images.labels
        inside = np.array([int(l) in vocab_of for l in labels], dtype=bool)
        if not inside.any():
            raise DataError("no image label belongs to the hierarchy")
        self.image_rows = np.flatnonzero(inside)
        labels = labels[inside]
        images = dataset.images.embeddings.data[inside]

        self.n_images = images.shape[0]
        self.own = np.array([vocab_of[int(l)] for l in labels], dtype=np.int64)
        self.sizes = np.array([len(v) for v in hierarchy], dtype=np.int64)
        self.best = np.empty((self.n_images, n_vocab), dtype=np.float64)
        self.correct_within = np.zeros(self.n_images, dtype=bool)

        images64 = images.astype(np.float64)
        for v, vocab in enumerate(hierarchy):
            rows = catalog.rows_for(vocab.class_ids)
            scores = images64 @ dataset.text_features.data[rows].astype(np.float64).T
            self.best[:, v] = scores.max(axis=1)
            mine = self.own == v
            if not mine.any():
                raise DataError(f"vocabulary {vocab.label!r} has no images")
            ids = np.asarray(vocab.class_ids, dtype=np.int64)
            winner = ids[np.argmax(scores[mine], axis=1)]
            self.correct_within[mine] = winner == labels[mine]


def per_vocabulary_accuracy(dataset: EvaluationDataset) -> list[float]:
    """Closed accuracy of each vocabulary over its own images."""
    out = []
    for vocab in dataset.hierarchy:
        restricted = dataset.images.restrict_to(vocab.class_ids)
        out.append(matcher.accuracy(restricted, vocab, dataset.text_features, dataset.catalog))
    return out


def acc_closed(dataset: EvaluationDataset) -> float:
    """Mean closed accuracy over the hierarchy's vocabularies."""
    return kahan_mean(per_vocabulary_accuracy(dataset))


def _perm_expansion_curve(blocks: _VocabBlocks, perm: np.ndarray) -> np.ndarray:
    """Step accuracies for one expansion order over the whole hierarchy."""
    n_vocab = perm.shape[0]
    pos = np.empty(n_vocab, dtype=np.int64)
    pos[perm] = np.arange(n_vocab)
    own_pos = pos[blocks.own]

    cur = np.full(blocks.n_images, -np.inf)
    win = np.full(blocks.n_images, -1, dtype=np.int64)
    accs = np.empty(n_vocab, dtype=np.float64)
    for i in range(n_vocab):
        v = int(perm[i])
        column = blocks.best[:, v]
        update = column > cur  # strict: earlier vocabularies keep ties
        cur = np.where(update, column, cur)
        win = np.where(update, v, win)
        included = own_pos <= i
        correct = included & (win == blocks.own) & blocks.correct_within
        accs[i] = correct.sum() / included.sum()
    return accs


def _curve(sizes_rows: Sequence[np.ndarray], acc_rows: Sequence[np.ndarray]) -> ExpansionCurve:
    mean_sizes = kahan_column_means([s.astype(np.float64) for s in sizes_rows])
    mean_accs = kahan_column_means(list(acc_rows))
    steps = tuple(
        CurveStep(step=i + 1, vocab_size=float(mean_sizes[i]), accuracy=float(mean_accs[i]))
        for i in range(mean_accs.shape[0])
    )
    return ExpansionCurve(steps)


def extensibility(
    dataset: EvaluationDataset,
    config: SamplerConfig,
    threads: int = 1,
) -> ExtensibilityResult:
    """Expected mean accuracy along sampled cumulative vocabulary unions.

    A single-vocabulary hierarchy degenerates to closed accuracy, exactly:
    there is only one (empty) expansion order.
    """
    n_vocab = len(dataset.hierarchy)
    if n_vocab == 1:
        vocab = dataset.hierarchy[0]
        restricted = dataset.images.restrict_to(vocab.class_ids)
        acc = matcher.accuracy(restricted, vocab, dataset.text_features, dataset.catalog)
        curve = ExpansionCurve((CurveStep(1, float(len(vocab)), acc),))
        return ExtensibilityResult(acc_e=acc, curve=curve, samples=1, exact=True)

    blocks = _VocabBlocks(dataset)
    samples = config.sample_count or 100 * n_vocab

    def one(j: int):
        perm = permutation_at(n_vocab, config.seed, j, STREAM_EXTENSIBILITY)
        accs = _perm_expansion_curve(blocks, perm)
        sizes = np.cumsum(blocks.sizes[perm])
        return accs, sizes

    results = _ordered_map(one, samples, threads)
    acc_rows = [r[0] for r in results]
    size_rows = [r[1] for r in results]
    acc_e = kahan_mean(kahan_mean(a) for a in acc_rows)
    return ExtensibilityResult(
        acc_e=acc_e, curve=_curve(size_rows, acc_rows), samples=samples, exact=False
    )


def extensibility_enumerated(
    dataset: EvaluationDataset, exact_threshold: int = 6
) -> ExtensibilityResult:
    """Extensibility by full enumeration of all N! expansion orders."""
    n_vocab = len(dataset.hierarchy)
    if n_vocab == 1:
        return extensibility(dataset, SamplerConfig(seed=0, sample_count=1))
    if n_vocab > exact_threshold:
        raise TooManyVocabularies(
            f"{n_vocab}! permutations exceed the exact threshold of {exact_threshold}"
        )
    blocks = _VocabBlocks(dataset)
    acc_rows = []
    size_rows = []
    for perm in itertools.permutations(range(n_vocab)):
        perm = np.array(perm, dtype=np.int64)
        acc_rows.append(_perm_expansion_curve(blocks, perm))
        size_rows.append(np.cumsum(blocks.sizes[perm]))
    acc_e = kahan_mean(kahan_mean(a) for a in acc_rows)
    return ExtensibilityResult(
        acc_e=acc_e,
        curve=_curve(size_rows, acc_rows),
        samples=len(acc_rows),
        exact=True,
    )


def extensibility_exact(dataset: EvaluationDataset, exact_threshold: int = 6) -> float:
    """Exact extensibility value; see extensibility_enumerated for the curve."""
    return extensibility_enumerated(dataset, exact_threshold).acc_e


def local_stability(
    dataset: EvaluationDataset,
    target_index: int,
    config: SamplerConfig,
    threads: int = 1,
    _blocks: _VocabBlocks | None = None,
) -> LocalStabilityResult:
    """Conditional accuracy of one target under sampled distractor expansion.

    Target images stay fixed; the other vocabularies join as distractors in
    sampled cumulative order. Zero distractors degenerates to the target's
    closed accuracy, exactly.
    """
    n_vocab = len(dataset.hierarchy)
    if not 0 <= target_index < n_vocab:
        raise DataError(f"target index {target_index} outside 0..{n_vocab - 1}")
    blocks = _blocks if _blocks is not None else _VocabBlocks(dataset)
    target = dataset.hierarchy[target_index]

    mine = blocks.own == target_index
    t_max = blocks.best[mine, target_index]
    correct_within = blocks.correct_within[mine]
    closed = float(correct_within.sum() / correct_within.shape[0])

    others = [v for v in range(n_vocab) if v != target_index]
    n_dist = len(others)
    if n_dist == 0:
        return LocalStabilityResult(
            target_index=target_index,
            target_label=target.label,
            closed_accuracy=closed,
            acc_s_tilde=closed,
            curve=ExpansionCurve(()),
            samples=0,
        )

    distractor_best = blocks.best[mine][:, others]
    distractor_sizes = blocks.sizes[others]
    n_target_images = t_max.shape[0]
    samples = config.sample_count or 100
    stream = STREAM_STABILITY_BASE + target_index

    def one(j: int):
        perm = permutation_at(n_dist, config.seed, j, stream)
        running = np.maximum.accumulate(distractor_best[:, perm], axis=1)
        survive = running <= t_max[:, None]  # a tie never displaces the target
        correct = survive & correct_within[:, None]
        accs = correct.sum(axis=0) / n_target_images
        sizes = len(target) + np.cumsum(distractor_sizes[perm])
        return accs, sizes

    results = _ordered_map(one, samples, threads)
    acc_rows = [r[0] for r in results]
    size_rows = [r[1] for r in results]
    acc_s_tilde = kahan_mean(kahan_mean(a) for a in acc_rows)
    return LocalStabilityResult(
        target_index=target_index,
        target_label=target.label,
        closed_accuracy=closed,
        acc_s_tilde=acc_s_tilde,
        curve=_curve(size_rows, acc_rows),
        samples=samples,
    )


def general_stability(
    dataset: EvaluationDataset,
    config: SamplerConfig,
    threads: int = 1,
) -> GeneralStabilityResult:
    """Unweighted mean of local stability over every vocabulary as target."""
    blocks = _VocabBlocks(dataset)
    locals_ = tuple(
        local_stability(dataset, t, config, threads=threads, _blocks=blocks)
        for t in range(len(dataset.hierarchy))
    )
    acc_s = kahan_mean(r.acc_s_tilde for r in locals_)
    if locals_[0].curve.steps:
        acc_rows = [np.array(r.curve.accuracies()) for r in locals_]
        size_rows = [np.array([s.vocab_size for s in r.curve.steps]) for r in locals_]
        mean_curve = _curve(size_rows, acc_rows)
    else:
        mean_curve = ExpansionCurve(())
    return GeneralStabilityResult(acc_s=acc_s, locals=locals_, mean_curve=mean_curve)


@dataclass(frozen=True)
class ProtocolReport:
    """Everything the expansion protocols measured on one dataset."""

    acc_c: float
    per_vocabulary: tuple[float, ...]
    extensibility: ExtensibilityResult | None = None
    stability: GeneralStabilityResult | None = None
    seed: int | None = None

    def as_dict(self) -> dict:
        out: dict = {
            "acc_c": self.acc_c,
            "per_vocabulary_accuracy": list(self.per_vocabulary),
            "seed": self.seed,
        }
        if self.extensibility is not None:
            ext = self.extensibility
            out["acc_e"] = ext.acc_e
            out["delta_e"] = ext.acc_e - self.acc_c
            out["extensibility_samples"] = ext.samples
            out["extensibility_exact"] = ext.exact
            out["curves"] = out.get("curves", {})
            out["curves"]["extensibility"] = ext.curve.as_dict()
        if self.stability is not None:
            stab = self.stability
            out["acc_s"] = stab.acc_s
            out["delta_s"] = stab.acc_s - self.acc_c
            out["per_vocabulary_stability"] = [
                {
                    "target": r.target_label,
                    "target_index": r.target_index,
                    "closed_accuracy": r.closed_accuracy,
                    "acc_s_tilde": r.acc_s_tilde,
                    "samples": r.samples,
                }
                for r in stab.locals
            ]
            out["curves"] = out.get("curves", {})
            out["curves"]["stability"] = stab.mean_curve.as_dict()
        return out

    def curve_rows(self) -> list[tuple[str, int, float, float]]:
        """CSV payload: one row per curve step."""
        rows: list[tuple[str, int, float, float]] = []
        if self.extensibility is not None:
            for s in self.extensibility.curve.steps:
                rows.append(("extensibility", s.step, s.vocab_size, s.accuracy))
        if self.stability is not None:
            for s in self.stability.mean_curve.steps:
                rows.append(("stability", s.step, s.vocab_size, s.accuracy))
        return rows


def evaluate_protocol(
    dataset: EvaluationDataset,
    config: SamplerConfig,
    threads: int = 1,
    include_extensibility: bool = True,
    include_stability: bool = True,
) -> ProtocolReport:
    """Run the full protocol battery with one shared configuration."""
    per_vocab = per_vocabulary_accuracy(dataset)
    report = ProtocolReport(
        acc_c=kahan_mean(per_vocab),
        per_vocabulary=tuple(per_vocab),
        extensibility=extensibility(dataset, config, threads) if include_extensibility else None,
        stability=general_stability(dataset, config, threads) if include_stability else None,
        seed=config.seed,
    )
    return report


def permutation_space(n: int) -> int:
    """N! as an int, for budget checks and tests."""
    return math.factorial(n)
