"""Ranked list maintenance, Average Precision, listwise step rewards, MAP/MRR."""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field

EQUAL_AP_REWARD = 0.1
AP_EQ_TOL = 1e-12


@dataclass(frozen=True)
class Entry:
    index: int
    score: float
    label: int
    step: int
    tier: int = 0

    @property
    def key(self):
        # ascending key == descending (tier, score), then earliest arrival
        return (-self.tier, -self.score, self.step)


@dataclass
class RankedList:
    """Candidates sorted by score (descending), ties broken by arrival order.

    ``tier`` is an optional coarse key sorted before the score; entries in a
    higher tier always rank above entries in a lower one.
    """

    entries: list[Entry] = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def labels(self) -> list[int]:
        return [e.label for e in self.entries]

    @property
    def indices(self) -> list[int]:
        return [e.index for e in self.entries]

    def insert(self, index: int, score: float, label: int, tier: int = 0) -> "RankedList":
        if any(e.index == index for e in self.entries):
            raise ValueError(f"candidate {index} is already ranked")
        if not 0.0 <= score <= 1.0:
            raise ValueError(f"score {score} outside [0, 1]")
        entry = Entry(index, float(score), int(label), len(self.entries), int(tier))
        keys = [e.key for e in self.entries]
        pos = bisect.bisect_right(keys, entry.key)
        return RankedList(self.entries[:pos] + [entry] + self.entries[pos:])


def average_precision(ranked) -> float:
    """AP of a ranked list (``RankedList`` or sequence of 0/1 labels); 0 when nothing is relevant."""
    labels = ranked.labels if isinstance(ranked, RankedList) else list(ranked)
    hits, total = 0, 0.0
    for rank, label in enumerate(labels, start=1):
        if label:
            hits += 1
            total += hits / rank
    return total / hits if hits else 0.0


def step_reward(ap_t: float, ap_prev: float) -> float:
    if abs(ap_t - ap_prev) <= AP_EQ_TOL:
        return EQUAL_AP_REWARD
    return ap_t - ap_prev


def reciprocal_rank(ranked) -> float:
    labels = ranked.labels if isinstance(ranked, RankedList) else list(ranked)
    for rank, label in enumerate(labels, start=1):
        if label:
            return 1.0 / rank
    raise ValueError("ranked list has no correct candidate")


def map_mrr(ranked_lists) -> tuple[float, float]:
    """Mean AP and mean reciprocal rank over questions' final ranked lists."""
    ranked_lists = list(ranked_lists)
    if not ranked_lists:
        raise ValueError("no questions to score")
    aps, rrs = [], []
    for i, ranked in enumerate(ranked_lists):
        labels = ranked.labels if isinstance(ranked, RankedList) else list(ranked)
        if not any(labels):
            raise ValueError(f"question #{i} has no correct candidate")
        aps.append(average_precision(labels))
        rrs.append(reciprocal_rank(labels))
    return sum(aps) / len(aps), sum(rrs) / len(rrs)


def rank_by_scores(scores, labels) -> RankedList:
    """Insert candidates in index order with the given scores."""
    ranked = RankedList()
    for i, (s, y) in enumerate(zip(scores, labels)):
        ranked = ranked.insert(i, s, y)
    return ranked


def metrics_report(qids, ranked_lists) -> dict:
    """Structured report: overall MAP/MRR plus per-question AP, RR and final order."""
    ranked_lists = list(ranked_lists)
    mean_ap, mrr = map_mrr(ranked_lists)
    questions = []
    for qid, ranked in zip(qids, ranked_lists):
        questions.append({
            "qid": qid,
            "ap": average_precision(ranked),
            "rr": reciprocal_rank(ranked),
            "ranking": [{"index": e.index, "score": e.score, "label": e.label} for e in ranked],
        })
    return {"MAP": mean_ap, "MRR": mrr, "questions": questions}
