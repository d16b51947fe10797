"""Turns (user, rec position) rows into padded model inputs."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .data import Dataset, TRAIN, UserHistory, truncate
from .model import Batch


@dataclass(frozen=True)
class FeatureLimits:
    max_rec_len: int = 20
    max_search_len: int = 20
    max_query_words: int = 8
    max_clicks: int = 4


def row_context(user: UserHistory, position: int | None) -> tuple[tuple[int, ...], tuple]:
    """Rec items before ``position`` and search records strictly earlier than its timestamp.

    ``position=None`` means "after the whole history" (next-item serving).
    """
    if position is None:
        return user.rec_history, user.search_history
    ts = user.rec_timestamps[position]
    return user.rec_history[:position], user.search_before(ts)


def build_batch(dataset: Dataset, rows: Sequence[tuple[int, int | None]], limits: FeatureLimits) -> Batch:
    n = len(rows)
    nr, ns = max(limits.max_rec_len, 1), max(limits.max_search_len, 1)
    wq, cq = max(limits.max_query_words, 1), max(limits.max_clicks, 1)
    user = np.zeros(n, dtype=np.int64)
    rec = np.zeros((n, nr), dtype=np.int64)
    rec_mask = np.zeros((n, nr), dtype=bool)
    words = np.zeros((n, ns, wq), dtype=np.int64)
    word_mask = np.zeros((n, ns, wq), dtype=bool)
    clicks = np.zeros((n, ns, cq), dtype=np.int64)
    click_mask = np.zeros((n, ns, cq), dtype=bool)
    s_mask = np.zeros((n, ns), dtype=bool)
    for i, (uid, pos) in enumerate(rows):
        u = dataset.users[uid]
        user[i] = uid
        rec_hist, search_hist = row_context(u, pos)
        rec_hist = truncate(rec_hist, limits.max_rec_len)
        rec[i, : len(rec_hist)] = rec_hist
        rec_mask[i, : len(rec_hist)] = True
        for j, record in enumerate(truncate(search_hist, limits.max_search_len)):
            s_mask[i, j] = True
            w = record.query.words[:wq]
            words[i, j, : len(w)] = w
            word_mask[i, j, : len(w)] = True
            c = record.clicked_items[:cq]
            clicks[i, j, : len(c)] = c
            click_mask[i, j, : len(c)] = True
    return Batch(*(torch.from_numpy(a) for a in (user, rec, rec_mask, words, word_mask, clicks, click_mask, s_mask)))


def training_rows(dataset: Dataset) -> list[tuple[int, int]]:
    """Every train-labelled rec interaction that has at least one earlier rec item."""
    return [(u, p) for u, p in dataset.rows(TRAIN) if p >= 1]


class NegativeSampler:
    """Uniform draws from items the user never touched in either channel."""

    def __init__(self, dataset: Dataset):
        self.n_items = dataset.n_items
        self.seen = [np.fromiter(sorted(u.interacted_items()), dtype=np.int64) for u in dataset.users]

    def eligible_count(self, user: int) -> int:
        return self.n_items - len(self.seen[user])

    def sample(self, user: int, k: int, rng: np.random.Generator, replace: bool = False) -> np.ndarray:
        seen = self.seen[user]
        available = self.n_items - len(seen)
        if available <= 0:
            return np.zeros(0, dtype=np.int64)
        if replace:
            out = np.empty(k, dtype=np.int64)
            filled = 0
            while filled < k:
                draw = rng.integers(self.n_items, size=2 * (k - filled) + 4)
                draw = draw[~np.isin(draw, seen)]
                take = min(len(draw), k - filled)
                out[filled:filled + take] = draw[:take]
                filled += take
            return out
        k = min(k, available)
        if available <= 4 * k:
            pool = np.setdiff1d(np.arange(self.n_items), seen, assume_unique=True)
            return rng.choice(pool, size=k, replace=False)
        chosen: list[int] = []
        taken: set[int] = set()
        seen_set = set(seen.tolist())
        while len(chosen) < k:
            for i in rng.integers(self.n_items, size=2 * (k - len(chosen))).tolist():
                if i not in seen_set and i not in taken:
                    taken.add(i)
                    chosen.append(i)
                    if len(chosen) == k:
                        break
        return np.asarray(chosen, dtype=np.int64)
