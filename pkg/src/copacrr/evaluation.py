"""Ranking quality measures: ERR@k over graded rankings, re-ranking
improvement statistics across many runs, and pairwise ordering accuracy
split by label pair.

Scorers are callables (query_id, doc_id) -> float | None; None marks a
document that cannot be scored (e.g. missing text), which sinks to the
bottom with a warning counter.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .corpus import Judgments, RankedList, RunEntry, MERGED_NAMES

log = logging.getLogger(__name__)

Scorer = Callable[[str, str], "float | None"]

# The three label pairs with distinct merged grades, highest first.
LABEL_PAIRS = ("HRel-NRel", "HRel-Rel", "Rel-NRel")


def _label_pair_name(hi_grade: int, lo_grade: int) -> str:
    return f"{MERGED_NAMES[hi_grade]}-{MERGED_NAMES[lo_grade]}"


@dataclass
class GradedRanking:
    """Relevance grades in rank order; grades are integers >= 0 up to g_max."""

    grades: Sequence[int]
    g_max: int = 2

    def __post_init__(self):
        if self.g_max < 1:
            raise ValueError(f"g_max must be >= 1, got {self.g_max}")
        if any(g > self.g_max for g in self.grades):
            raise ValueError(f"grade above g_max={self.g_max} in {list(self.grades)}")


def err_at_k(ranking: GradedRanking, k: int) -> float:
    """Expected reciprocal rank at cutoff k.

    ERR = sum_{r<=k} (1/r) * R(g_r) * prod_{i<r} (1 - R(g_i)) with the
    stopping probability R(g) = (2^g - 1) / 2^g_max. Grades below 0 are
    clamped to 0.
    """
    if k < 1:
        raise ValueError(f"cutoff must be >= 1, got {k}")
    denom = 2.0**ranking.g_max
    continue_p = 1.0
    total = 0.0
    for r, grade in enumerate(ranking.grades[:k], start=1):
        stop = (2.0 ** max(grade, 0) - 1.0) / denom
        total += continue_p * stop / r
        continue_p *= 1.0 - stop
    return total


def graded_from_run(
    ranked: RankedList, judgments: Judgments, g_max: int = 2
) -> GradedRanking:
    """Merged grades for a ranked list; unjudged documents count as 0."""
    grades = []
    for entry in ranked.entries:
        g = judgments.merged_grade(ranked.query_id, entry.doc_id)
        grades.append(g if g is not None else 0)
    return GradedRanking(grades, g_max)


def rerank_with_model(
    candidates: RankedList, scorer: Scorer, stats: dict | None = None
) -> RankedList:
    """Reorder a candidate list by descending model score; ties keep the
    original rank order. Unscorable documents score -inf and sink."""
    scores = []
    missing = 0
    for entry in candidates.entries:
        s = scorer(candidates.query_id, entry.doc_id)
        if s is None:
            missing += 1
            s = float("-inf")
        scores.append(s)
    if missing:
        log.warning(
            "query %s: %d candidate document(s) could not be scored",
            candidates.query_id,
            missing,
        )
        if stats is not None:
            stats["missing_docs"] = stats.get("missing_docs", 0) + missing
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    entries = [
        RunEntry(candidates.entries[i].doc_id, scores[i], rank)
        for rank, i in enumerate(order, start=1)
    ]
    return RankedList(candidates.query_id, entries)


def mean_run_err(
    run: Sequence[RankedList], judgments: Judgments, k: int = 20
) -> float:
    """Equal-weight mean ERR@k over the run's queries."""
    if not run:
        raise ValueError("empty run")
    return float(
        np.mean([err_at_k(graded_from_run(rl, judgments), k) for rl in run])
    )


def rerank_all_stats(
    runs: Sequence[Sequence[RankedList]],
    scorer: Scorer,
    judgments: Judgments,
    k: int = 20,
) -> dict:
    """Re-rank every run and compare mean ERR@k before vs after.

    Returns improved_fraction (share of runs whose mean ERR went up),
    mean_relative_delta (mean over runs of (after - before) / before,
    excluding runs whose before-score is 0), the count of such excluded
    runs, and the per-run (before, after) values.
    """
    if not runs:
        raise ValueError("rerank_all_stats needs at least one run")
    per_run = []
    improved = 0
    deltas = []
    excluded_zero = 0
    for run in runs:
        before = mean_run_err(run, judgments, k)
        after = mean_run_err(
            [rerank_with_model(rl, scorer) for rl in run], judgments, k
        )
        per_run.append((before, after))
        if after > before:
            improved += 1
        if before > 0:
            deltas.append((after - before) / before)
        else:
            excluded_zero += 1
    return {
        "improved_fraction": improved / len(runs),
        "mean_relative_delta": float(np.mean(deltas)) if deltas else 0.0,
        "excluded_zero_baseline": excluded_zero,
        "per_run": per_run,
    }


@dataclass
class PairStats:
    tested: int = 0
    correct: float = 0.0
    ties: int = 0

    @property
    def accuracy(self) -> float:
        return self.correct / self.tested if self.tested else 0.0


@dataclass
class PairAccuracyReport:
    """Ordering accuracy per label pair plus tie bookkeeping."""

    per_pair: dict[str, PairStats] = field(
        default_factory=lambda: {name: PairStats() for name in LABEL_PAIRS}
    )
    tie_policy: str = "incorrect"

    def accuracy(self, label_pair: str) -> float:
        return self.per_pair[label_pair].accuracy

    @property
    def total_tested(self) -> int:
        return sum(s.tested for s in self.per_pair.values())

    @property
    def total_ties(self) -> int:
        return sum(s.ties for s in self.per_pair.values())

    @property
    def overall_accuracy(self) -> float:
        tested = self.total_tested
        if not tested:
            return 0.0
        return sum(s.correct for s in self.per_pair.values()) / tested


def pair_accuracy(
    judgments: Judgments,
    scorer: Scorer,
    queries: Sequence[str],
    tie_policy: str = "incorrect",
) -> PairAccuracyReport:
    """Fraction of differently-graded document pairs the scorer orders in
    agreement with the judgments, per label pair.

    A pair is correct iff the strictly higher-graded document gets the
    strictly higher score. Equal scores are incorrect under the default
    policy; tie_policy "half" credits them 0.5.
    """
    if tie_policy not in ("incorrect", "half"):
        raise ValueError(f"unknown tie policy {tie_policy!r}")
    report = PairAccuracyReport(tie_policy=tie_policy)
    for qid in queries:
        graded = judgments.merged_by_query(qid)
        docs = sorted(graded)
        scores: dict[str, float] = {}
        for did in docs:
            s = scorer(qid, did)
            scores[did] = float("-inf") if s is None else s
        for i, d1 in enumerate(docs):
            for d2 in docs[i + 1 :]:
                if graded[d1] == graded[d2]:
                    continue
                hi, lo = (d1, d2) if graded[d1] > graded[d2] else (d2, d1)
                stats = report.per_pair[_label_pair_name(graded[hi], graded[lo])]
                stats.tested += 1
                if scores[hi] > scores[lo]:
                    stats.correct += 1
                elif scores[hi] == scores[lo]:
                    stats.ties += 1
                    if tie_policy == "half":
                        stats.correct += 0.5
    return report
