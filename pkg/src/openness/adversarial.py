"""Adversarial distractor search over a candidate word lexicon.

A candidate word hurts the target vocabulary when its embedding outscores the
within-target winner on target images; appended after the target, it displaces
a winner only with a strictly greater score. All strategies minimize the same
conditional accuracy, so the exhaustive optimum lower-bounds both heuristics
on identical floats.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from math import comb
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    DataError,
    DimMismatch,
    ExhaustiveBudgetExceeded,
    InvalidShape,
    LexiconTooSmall,
    NotNormalized,
    OverlapBetweenTargetAndDistractors,
)
from .store import (
    ClassCatalog,
    EmbeddingMatrix,
    LabeledImageSet,
    Vocabulary,
    load_embedding_matrix,
    normalize_name,
)

STRATEGIES = ("top_k_individual", "greedy_forward", "exhaustive")
EXHAUSTIVE_BUDGET = 10**6


@dataclass(frozen=True)
class CandidateLexicon:
    """Candidate distractor words with one embedding row per word."""

    words: tuple[str, ...]
    embeddings: EmbeddingMatrix

    def __post_init__(self):
        object.__setattr__(self, "words", tuple(self.words))
        if not self.words:
            raise DataError("lexicon has no words")
        if len(self.words) != self.embeddings.rows:
            raise InvalidShape(
                f"{len(self.words)} words but {self.embeddings.rows} embedding rows"
            )

    def __len__(self) -> int:
        return len(self.words)


@dataclass(frozen=True)
class AdversarialResult:
    strategy: str
    size: int
    target_label: str
    closed_accuracy: float
    combined_accuracy: float
    selected: tuple[tuple[str, float], ...]  # (word, single-word conditional accuracy)

    @property
    def drop(self) -> float:
        return self.closed_accuracy - self.combined_accuracy

    def as_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "size": self.size,
            "target": self.target_label,
            "closed_accuracy": self.closed_accuracy,
            "combined_conditional_accuracy": self.combined_accuracy,
            "accuracy_drop": self.drop,
            "selected": [
                {"word": w, "single_word_accuracy": a} for w, a in self.selected
            ],
        }


def load_lexicon(words_path, container_path) -> CandidateLexicon:
    """Words from a plain text file (one per line) plus their embedding container."""
    words = [
        line.strip()
        for line in Path(words_path).read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]
    return CandidateLexicon(tuple(words), load_embedding_matrix(container_path))


def exclude_target_names(
    lexicon: CandidateLexicon, target: Vocabulary, catalog: ClassCatalog
) -> CandidateLexicon:
    """Drop candidate words that name a target class (case-insensitive, NFC)."""
    taken = {normalize_name(catalog.entry(c).name) for c in target.class_ids}
    keep = [i for i, w in enumerate(lexicon.words) if normalize_name(w) not in taken]
    if not keep:
        raise LexiconTooSmall("every candidate word names a target class")
    if len(keep) == len(lexicon):
        return lexicon
    return CandidateLexicon(
        tuple(lexicon.words[i] for i in keep),
        EmbeddingMatrix(lexicon.embeddings.data[keep], lexicon.embeddings.normalized),
    )


def _attack_arrays(
    images: LabeledImageSet,
    target: Vocabulary,
    lexicon: CandidateLexicon,
    texts: EmbeddingMatrix,
    catalog: ClassCatalog,
):
    """(correct_within, target_max, candidate_scores) on target images."""
    taken = {normalize_name(catalog.entry(c).name) for c in target.class_ids}
    clash = [w for w in lexicon.words if normalize_name(w) in taken]
    if clash:
        raise OverlapBetweenTargetAndDistractors(
            f"candidate words {clash[:5]} name target classes; "
            "route through exclude_target_names first"
        )
    if lexicon.embeddings.dim != texts.dim:
        raise DimMismatch(
            f"lexicon dim {lexicon.embeddings.dim} != text dim {texts.dim}"
        )
    if not lexicon.embeddings.normalized:
        raise NotNormalized("lexicon embeddings are not unit-normalized")

    outside = set(int(l) for l in images.labels) - set(target.class_ids)
    if outside:
        raise DataError(f"image labels {sorted(outside)} are outside the target vocabulary")

    rows = catalog.rows_for(target.class_ids)
    images64 = images.embeddings.data.astype(np.float64)
    t_scores = images64 @ texts.data[rows].astype(np.float64).T
    t_max = t_scores.max(axis=1)
    ids = np.asarray(target.class_ids, dtype=np.int64)
    correct_within = ids[np.argmax(t_scores, axis=1)] == images.labels

    c_scores = images64 @ lexicon.embeddings.data.astype(np.float64).T
    return correct_within, t_max, c_scores


def _subset_accuracy(correct_within, t_max, c_scores, indices) -> float:
    """Conditional accuracy with the indexed candidate words as distractors."""
    worst = c_scores[:, list(indices)].max(axis=1)
    correct = correct_within & (worst <= t_max)
    return float(correct.sum() / correct.shape[0])


def score_candidate_words(
    images: LabeledImageSet,
    target: Vocabulary,
    lexicon: CandidateLexicon,
    texts: EmbeddingMatrix,
    catalog: ClassCatalog,
) -> list[tuple[str, float]]:
    """Single-word conditional accuracy per candidate, most damaging first.

    Stable ascending sort: equal accuracies keep lexicon order. Scores are
    independent per word, so permuting the lexicon permutes the scores.
    """
    correct_within, t_max, c_scores = _attack_arrays(images, target, lexicon, texts, catalog)
    beaten = c_scores > t_max[:, None]
    survive = ~beaten & correct_within[:, None]
    accs = survive.sum(axis=0) / survive.shape[0]
    order = sorted(range(len(lexicon)), key=lambda i: (accs[i], i))
    return [(lexicon.words[i], float(accs[i])) for i in order]


def build_adversarial_vocabulary(
    images: LabeledImageSet,
    target: Vocabulary,
    lexicon: CandidateLexicon,
    size: int,
    strategy: str = "top_k_individual",
    *,
    texts: EmbeddingMatrix,
    catalog: ClassCatalog,
    exhaustive_budget: int = EXHAUSTIVE_BUDGET,
) -> AdversarialResult:
    """Pick `size` distractor words to minimize target conditional accuracy.

    top_k_individual takes the `size` most damaging single words;
    greedy_forward adds the word that most lowers the running set's accuracy;
    exhaustive enumerates every C(lexicon, size) subset (budget-guarded) and
    is never beaten by either heuristic. All ties resolve to lexicon order.
    """
    if strategy not in STRATEGIES:
        raise DataError(f"unknown strategy {strategy!r}; options: {STRATEGIES}")
    if size < 1:
        raise DataError("adversarial vocabulary size must be at least 1")
    if len(lexicon) < size:
        raise LexiconTooSmall(f"{len(lexicon)} candidate words for size {size}")

    correct_within, t_max, c_scores = _attack_arrays(images, target, lexicon, texts, catalog)
    beaten = c_scores > t_max[:, None]
    survive = ~beaten & correct_within[:, None]
    single = survive.sum(axis=0) / survive.shape[0]
    closed = float(correct_within.sum() / correct_within.shape[0])

    if strategy == "top_k_individual":
        order = sorted(range(len(lexicon)), key=lambda i: (single[i], i))
        chosen = order[:size]
    elif strategy == "greedy_forward":
        chosen = []
        running = np.full(t_max.shape[0], -np.inf)
        for _ in range(size):
            best_i = -1
            best_acc = np.inf
            for i in range(len(lexicon)):
                if i in chosen:
                    continue
                worst = np.maximum(running, c_scores[:, i])
                acc = float((correct_within & (worst <= t_max)).sum() / t_max.shape[0])
                if acc < best_acc:  # strict: first lexicon index keeps ties
                    best_acc = acc
                    best_i = i
            chosen.append(best_i)
            running = np.maximum(running, c_scores[:, best_i])
    else:
        total = comb(len(lexicon), size)
        if total > exhaustive_budget:
            raise ExhaustiveBudgetExceeded(
                f"C({len(lexicon)}, {size}) = {total} subsets exceed the budget "
                f"of {exhaustive_budget}"
            )
        chosen = None
        best_acc = np.inf
        for subset in combinations(range(len(lexicon)), size):
            acc = _subset_accuracy(correct_within, t_max, c_scores, subset)
            if acc < best_acc:  # strict: first subset in lexicon order keeps ties
                best_acc = acc
                chosen = list(subset)

    combined = _subset_accuracy(correct_within, t_max, c_scores, chosen)
    return AdversarialResult(
        strategy=strategy,
        size=size,
        target_label=target.label,
        closed_accuracy=closed,
        combined_accuracy=combined,
        selected=tuple((lexicon.words[i], float(single[i])) for i in chosen),
    )
