"""Sampled-negative leave-one-out evaluation and per-sparsity-group reporting."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .data import TEST, VALID, Dataset, SparsityGrouping
from .features import NegativeSampler

HR_KS = (1, 5, 10)
NDCG_KS = (5, 10)
METRICS = tuple(f"HR@{k}" for k in HR_KS) + tuple(f"NDCG@{k}" for k in NDCG_KS)
_SPLIT_CODE = {VALID: 1, TEST: 2}


class RowScorer(Protocol):
    def score_rows(self, rows: Sequence[tuple[int, int]], candidates: np.ndarray) -> np.ndarray:
        """Scores of shape (len(rows), C) for candidate item ids (len(rows), C)."""


def rank_of_truth(scores: np.ndarray, item_ids: np.ndarray) -> np.ndarray:
    """1-based rank of column 0 in every row.

    Higher score ranks first; equal scores are ordered by ascending item id.
    """
    scores = np.asarray(scores)
    item_ids = np.asarray(item_ids)
    truth = scores[:, :1]
    truth_id = item_ids[:, :1]
    ahead = (scores > truth) | ((scores == truth) & (item_ids < truth_id))
    return 1 + ahead[:, 1:].sum(axis=1)


def metrics_from_ranks(ranks: np.ndarray) -> dict[str, float]:
    ranks = np.asarray(ranks, dtype=np.int64)
    if ranks.size == 0:
        return {m: 0.0 for m in METRICS}
    n = ranks.size
    gains = 1.0 / np.log2(ranks + 1.0)
    # correctly rounded sums keep the result independent of row order
    out = {f"HR@{k}": int(np.sum(ranks <= k)) / n for k in HR_KS}
    out.update({f"NDCG@{k}": math.fsum(gains[ranks <= k].tolist()) / n for k in NDCG_KS})
    return out


@dataclass
class MetricsReport:
    split: str
    overall: dict
    groups: list = field(default_factory=list)
    boundaries: list = field(default_factory=list)
    seed: int = 0
    num_negatives: int = 99
    candidate_list_size: int = 100
    rows: int = 0
    short_rows: int = 0
    config: dict | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json() + "\n", encoding="utf-8")
        return path

    @classmethod
    def from_dict(cls, data: dict) -> "MetricsReport":
        return cls(**data)

    @classmethod
    def load(cls, path: str | Path) -> "MetricsReport":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def group_metrics(self, group: int) -> dict | None:
        for g in self.groups:
            if g["group"] == group:
                return g["metrics"]
        return None


def candidate_lists(dataset: Dataset, split: str, num_negatives: int, seed: int) -> tuple[list[tuple[int, int]], np.ndarray, int]:
    """Rows of ``split`` with [truth, negatives...] candidate ids.

    Each row draws from its own generator seeded by (seed, user, split) so
    lists do not depend on row order or process layout. Rows with fewer
    eligible negatives are padded with -1 and counted as short.
    """
    if split not in _SPLIT_CODE:
        raise ValueError(f"split must be one of {tuple(_SPLIT_CODE)}")
    rows = dataset.rows(split)
    sampler = NegativeSampler(dataset)
    cands = np.full((len(rows), num_negatives + 1), -1, dtype=np.int64)
    short = 0
    for i, (u, pos) in enumerate(rows):
        rng = np.random.default_rng([seed, u, _SPLIT_CODE[split]])
        neg = sampler.sample(u, num_negatives, rng)
        short += len(neg) < num_negatives
        cands[i, 0] = dataset.users[u].rec_history[pos]
        cands[i, 1:1 + len(neg)] = neg
    return rows, cands, short


def score_candidates(scorer: RowScorer, rows, cands: np.ndarray, batch_rows: int = 256) -> np.ndarray:
    scores = np.empty(cands.shape, dtype=np.float64)
    for start in range(0, len(rows), batch_rows):
        chunk = cands[start:start + batch_rows]
        safe = np.where(chunk < 0, 0, chunk)
        s = np.asarray(scorer.score_rows(rows[start:start + batch_rows], safe), dtype=np.float64)
        scores[start:start + batch_rows] = np.where(chunk < 0, -np.inf, s)
    return scores


def evaluate(
    scorer: RowScorer,
    dataset: Dataset,
    split: str = TEST,
    num_negatives: int = 99,
    seed: int = 0,
    grouping: SparsityGrouping | None = None,
    config: dict | None = None,
) -> MetricsReport:
    rows, cands, short = candidate_lists(dataset, split, num_negatives, seed)
    if not rows:
        raise ValueError(f"split {split!r} has no rows")
    scores = score_candidates(scorer, rows, cands)
    # padded slots score -inf and carry id -1; push them behind the truth
    ids = np.where(cands < 0, np.iinfo(np.int64).max, cands)
    ranks = rank_of_truth(scores, ids)
    return report_from_ranks(split, rows, ranks, grouping, seed=seed, num_negatives=num_negatives, short_rows=short, config=config)


def report_from_ranks(split, rows, ranks, grouping=None, seed=0, num_negatives=99, short_rows=0, config=None) -> MetricsReport:
    groups = []
    boundaries: list = []
    if grouping is not None:
        boundaries = list(grouping.boundaries)
        row_groups = np.asarray([grouping.assignment[u] for u, _ in rows], dtype=np.int64)
        labels = grouping.labels()
        for g in range(grouping.num_groups):
            sel = row_groups == g
            groups.append({
                "group": g,
                "label": labels[g],
                "users": int(sum(1 for a in grouping.assignment if a == g)),
                "rows": int(sel.sum()),
                "empty": not bool(sel.any()),
                "metrics": metrics_from_ranks(ranks[sel]) if sel.any() else None,
            })
    return MetricsReport(
        split=split,
        overall=metrics_from_ranks(ranks),
        groups=groups,
        boundaries=boundaries,
        seed=seed,
        num_negatives=num_negatives,
        candidate_list_size=num_negatives + 1,
        rows=len(rows),
        short_rows=int(short_rows),
        config=config,
    )


def relative_change(a: float | None, b: float | None) -> float | None:
    if a is None or b is None or a == 0:
        return None
    return (b - a) / a


def group_report(report_a: MetricsReport, report_b: MetricsReport) -> list[dict]:
    """Relative improvement of ``report_b`` over ``report_a`` per group and overall."""
    out = [{
        "group": "all",
        "label": "all",
        "empty": False,
        "improvements": {m: relative_change(report_a.overall[m], report_b.overall[m]) for m in METRICS},
    }]
    b_groups = {g["group"]: g for g in report_b.groups}
    for ga in report_a.groups:
        gb = b_groups.get(ga["group"])
        empty = ga["empty"] or gb is None or gb["empty"]
        improvements = None
        if not empty:
            improvements = {m: relative_change(ga["metrics"][m], gb["metrics"][m]) for m in METRICS}
        out.append({"group": ga["group"], "label": ga["label"], "empty": empty, "improvements": improvements})
    return out
