"""Ranking metrics for link reconstruction (mAP, mRank) and detection (Hit@k)."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

HIT_KS = (1, 2, 5)
REPORT_KEYS = ("grouping_accuracy", "map", "mrank", "hit1", "hit2", "hit5", "n_queries", "n_pages")


@dataclass(frozen=True)
class RankedQuery:
    target: int
    candidates: tuple[int, ...]
    gold: frozenset[int]

    def __post_init__(self):
        if len(set(self.candidates)) != len(self.candidates) or self.target in self.candidates:
            raise ValueError(f"query {self.target}: duplicate candidates or target among candidates")
        if not self.gold <= set(self.candidates):
            raise ValueError(f"query {self.target}: gold ids {set(self.gold)} not all among candidates")

    def gold_ranks(self) -> list[int]:
        """Ascending 1-based ranks of the gold candidates."""
        return [r for r, c in enumerate(self.candidates, start=1) if c in self.gold]


def make_query(target: int, ranked: Sequence[int], gold: Iterable[int]) -> RankedQuery:
    return RankedQuery(int(target), tuple(int(c) for c in ranked), frozenset(int(g) for g in gold))


def average_precision(query: RankedQuery) -> float:
    """Mean over recall levels i/m (i = 1..m) of the best precision at exactly that recall.

    Recall reaches i/m first at the i-th gold rank and stays there until the
    next gold item, while precision only falls in between, so the best
    precision at that level is i / rank_i.
    """
    ranks = query.gold_ranks()
    if not ranks:
        raise ValueError(f"query {query.target} has no gold answers")
    return sum(i / r for i, r in enumerate(ranks, start=1)) / len(ranks)


def reverse_pairs(query: RankedQuery) -> int:
    """Number of (wrong above right) pairs: sum of gold ranks minus m(m+1)/2."""
    ranks = query.gold_ranks()
    if not ranks:
        raise ValueError(f"query {query.target} has no gold answers")
    m = len(ranks)
    return sum(ranks) - m * (m + 1) // 2


def hit_at_k(query: RankedQuery, k: int) -> int:
    if k < 1:
        raise ValueError(f"hit_at_k: k must be >= 1, got {k}")
    return int(any(c in query.gold for c in query.candidates[:k]))


@dataclass
class MetricReport:
    grouping_accuracy: float | None = None
    map: float | None = None
    mrank: float | None = None
    hit1: float | None = None
    hit2: float | None = None
    hit5: float | None = None
    n_queries: int = 0
    n_pages: int = 0
    excluded: int = field(default=0, compare=False)

    @property
    def empty(self) -> bool:
        return self.n_queries == 0

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in REPORT_KEYS}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def table(self) -> str:
        """Human-readable summary; Hit@k shown as percentages."""
        def fmt(v, pct=False, digits=4):
            if v is None:
                return "-"
            return f"{100 * v:.2f}" if pct else f"{v:.{digits}f}"

        head = ["Accuracy", "mAP", "mRank", "Hit@1", "Hit@2", "Hit@5", "queries", "pages"]
        row = [fmt(self.grouping_accuracy, pct=True), fmt(self.map), fmt(self.mrank, digits=2),
               fmt(self.hit1, True), fmt(self.hit2, True), fmt(self.hit5, True),
               str(self.n_queries), str(self.n_pages)]
        widths = [max(len(h), len(r)) for h, r in zip(head, row)]
        line = lambda cells: "  ".join(c.rjust(w) for c, w in zip(cells, widths))
        return line(head) + "\n" + line(row)


def aggregate(queries: Iterable[RankedQuery], grouping_accuracy: float | None = None,
              n_pages: int = 0) -> MetricReport:
    """Mean AP, mean reverse-pair count and Hit@{1,2,5} fractions over queries with gold."""
    usable, excluded = [], 0
    for q in queries:
        if q.gold:
            usable.append(q)
        else:
            excluded += 1
    report = MetricReport(grouping_accuracy=grouping_accuracy, n_pages=n_pages, excluded=excluded)
    if not usable:
        return report
    n = len(usable)
    report.n_queries = n
    report.map = math.fsum(average_precision(q) for q in usable) / n
    report.mrank = sum(reverse_pairs(q) for q in usable) / n
    report.hit1, report.hit2, report.hit5 = (sum(hit_at_k(q, k) for q in usable) / n for k in HIT_KS)
    return report
