"""Data model, JSONL I/O, leave-one-out splitting, sparsity grouping and a
seeded synthetic corpus generator."""

from __future__ import annotations

import bisect
import json
import logging
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

TRAIN, VALID, TEST = "train", "valid", "test"
MIN_SPLIT_LENGTH = 3


class DatasetError(ValueError):
    """Raised when a dataset file is malformed or inconsistent."""


@dataclass(frozen=True)
class Item:
    item_id: int
    key: str
    text: str = ""


@dataclass(frozen=True)
class Query:
    query_id: int
    words: tuple[int, ...]

    def __post_init__(self):
        if not self.words:
            raise DatasetError(f"query {self.query_id} has no words")


@dataclass(frozen=True)
class SearchRecord:
    query: Query
    clicked_items: tuple[int, ...]
    timestamp: int

    def __post_init__(self):
        if len(set(self.clicked_items)) != len(self.clicked_items):
            raise DatasetError(f"duplicate clicked item in search record at ts={self.timestamp}")


@dataclass(frozen=True)
class UserHistory:
    user_id: int
    key: str
    rec_history: tuple[int, ...]
    rec_timestamps: tuple[int, ...]
    search_history: tuple[SearchRecord, ...] = ()
    split: tuple[str, ...] = ()

    @property
    def n_rec(self) -> int:
        return len(self.rec_history)

    @property
    def n_search(self) -> int:
        return len(self.search_history)

    def interacted_items(self) -> set[int]:
        """Every item the user touched in either channel."""
        items = set(self.rec_history)
        for record in self.search_history:
            items.update(record.clicked_items)
        return items

    def search_before(self, timestamp: int) -> tuple[SearchRecord, ...]:
        """Search records with timestamps strictly earlier than ``timestamp``."""
        stamps = [r.timestamp for r in self.search_history]
        return self.search_history[: bisect.bisect_left(stamps, timestamp)]

    def position_of(self, label: str) -> int | None:
        for pos, lab in enumerate(self.split):
            if lab == label:
                return pos
        return None


@dataclass(frozen=True)
class Dataset:
    users: tuple[UserHistory, ...]
    items: tuple[Item, ...]
    vocab: tuple[str, ...]
    queries: tuple[Query, ...] = ()
    # generator ground truth (cluster labels); never serialized
    meta: Mapping = field(default_factory=dict, compare=False, repr=False)

    @property
    def n_users(self) -> int:
        return len(self.users)

    @property
    def n_items(self) -> int:
        return len(self.items)

    @property
    def n_words(self) -> int:
        return len(self.vocab)

    @property
    def n_queries(self) -> int:
        return len(self.queries)

    def query_text(self, query: Query) -> str:
        return " ".join(self.vocab[w] for w in query.words)

    def item_text(self, item_id: int) -> str:
        return self.items[item_id].text

    def stats(self) -> dict:
        return {
            "users": self.n_users,
            "items": self.n_items,
            "queries": self.n_queries,
            "words": self.n_words,
            "interactions_s": sum(u.n_search for u in self.users),
            "interactions_r": sum(u.n_rec for u in self.users),
        }

    def rows(self, label: str) -> list[tuple[int, int]]:
        """(user_id, rec position) pairs carrying ``label``."""
        out = []
        for user in self.users:
            for pos, lab in enumerate(user.split):
                if lab == label:
                    out.append((user.user_id, pos))
        return out


# ---------------------------------------------------------------------------
# splitting and grouping


def leave_one_out_split(dataset: Dataset) -> Dataset:
    """Label the last rec interaction test and the second-to-last valid.

    Users with fewer than three rec interactions are train-only.
    """
    users = []
    for user in dataset.users:
        n = user.n_rec
        if n >= MIN_SPLIT_LENGTH:
            labels = (TRAIN,) * (n - 2) + (VALID, TEST)
        else:
            labels = (TRAIN,) * n
        users.append(replace(user, split=labels))
    return replace(dataset, users=tuple(users))


@dataclass(frozen=True)
class SparsityGrouping:
    boundaries: tuple[int, ...]
    assignment: tuple[int, ...]

    @property
    def num_groups(self) -> int:
        return len(self.boundaries) + 1

    def group_of_count(self, n_search: int) -> int:
        # boundary values belong to the lower group
        return bisect.bisect_left(self.boundaries, n_search)

    def members(self, group: int) -> list[int]:
        return [u for u, g in enumerate(self.assignment) if g == group]

    def labels(self) -> list[str]:
        out, lo = [], 0
        for b in self.boundaries:
            out.append(f"{lo}-{b}" if b > lo else str(b))
            lo = b + 1
        out.append(f">={lo}")
        return out


def group_users_by_search_count(dataset: Dataset, num_groups: int) -> SparsityGrouping:
    if num_groups < 2:
        raise ValueError("num_groups must be >= 2")
    counts = np.array([u.n_search for u in dataset.users])
    if counts.size == 0:
        raise ValueError("dataset has no users")
    qs = [j / num_groups for j in range(1, num_groups)]
    raw = np.quantile(counts, qs, method="inverted_cdf")
    top = counts.max()
    boundaries = sorted({int(b) for b in raw if b < top})
    if len(boundaries) + 1 < num_groups:
        warnings.warn(
            f"requested {num_groups} sparsity groups but search counts only support "
            f"{len(boundaries) + 1}",
            stacklevel=2,
        )
    grouping = SparsityGrouping(tuple(boundaries), ())
    assignment = tuple(grouping.group_of_count(int(c)) for c in counts)
    return replace(grouping, assignment=assignment)


# ---------------------------------------------------------------------------
# JSONL I/O


def items_path_for(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".items" + path.suffix)


def _sorted_events(events: list[dict], line_no: int, kind: str) -> list[dict]:
    for ev in events:
        if not isinstance(ev.get("ts"), int):
            raise DatasetError(f"line {line_no}: {kind} event without integer 'ts'")
    # stable: equal timestamps keep file order
    return sorted(events, key=lambda ev: ev["ts"])


def load_dataset(path: str | Path, format: str = "jsonl", items_path: str | Path | None = None) -> Dataset:
    """Read a user-per-line JSONL file (plus the optional sibling item table).

    Ids are assigned densely in order of first appearance (within a line,
    search clicks are visited before rec items). When an item table
    is present every referenced item must be declared in it.
    """
    if format != "jsonl":
        raise ValueError(f"unsupported format {format!r}")
    path = Path(path)
    items_path = Path(items_path) if items_path is not None else items_path_for(path)

    item_ids: dict[str, int] = {}
    item_texts: list[str] = []
    declared = items_path.exists()
    if declared:
        with items_path.open(encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    key, text = str(obj["item"]), str(obj.get("text", ""))
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise DatasetError(f"{items_path}:{line_no}: {exc}") from exc
                if key in item_ids:
                    raise DatasetError(f"{items_path}:{line_no}: duplicate item {key!r}")
                item_ids[key] = len(item_texts)
                item_texts.append(text)

    def item_id(key, line_no):
        key = str(key)
        if key not in item_ids:
            if declared:
                raise DatasetError(f"line {line_no}: undeclared item {key!r}")
            item_ids[key] = len(item_texts)
            item_texts.append("")
        return item_ids[key]

    words: dict[str, int] = {}
    queries: dict[tuple[int, ...], Query] = {}
    users: list[UserHistory] = []
    seen_users: set[str] = set()

    with path.open(encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                key = str(obj["user"])
                rec = _sorted_events(list(obj.get("rec", [])), line_no, "rec")
                search = _sorted_events(list(obj.get("search", [])), line_no, "search")
            except (json.JSONDecodeError, KeyError, TypeError, AttributeError) as exc:
                raise DatasetError(f"line {line_no}: {exc}") from exc
            if key in seen_users:
                raise DatasetError(f"line {line_no}: duplicate user {key!r}")
            seen_users.add(key)

            records = []
            for ev in search:
                tokens = str(ev.get("query", "")).split()
                if not tokens:
                    raise DatasetError(f"line {line_no}: empty query")
                wids = tuple(words.setdefault(t, len(words)) for t in tokens)
                query = queries.setdefault(wids, Query(len(queries), wids))
                clicked = tuple(item_id(k, line_no) for k in ev.get("clicked", []))
                try:
                    records.append(SearchRecord(query, clicked, ev["ts"]))
                except DatasetError as exc:
                    raise DatasetError(f"line {line_no}: {exc}") from exc
            users.append(
                UserHistory(
                    user_id=len(users),
                    key=key,
                    rec_history=tuple(item_id(ev["item"], line_no) for ev in rec),
                    rec_timestamps=tuple(ev["ts"] for ev in rec),
                    search_history=tuple(records),
                )
            )

    dataset = Dataset(
        users=tuple(users),
        items=tuple(Item(i, k, item_texts[i]) for k, i in item_ids.items()),
        vocab=tuple(words),
        queries=tuple(queries.values()),
    )
    return leave_one_out_split(dataset)


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    """Write the user file and its sibling item table."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for user in dataset.users:
            obj = {
                "user": user.key,
                "rec": [
                    {"item": dataset.items[i].key, "ts": ts}
                    for i, ts in zip(user.rec_history, user.rec_timestamps)
                ],
                "search": [
                    {
                        "query": dataset.query_text(r.query),
                        "clicked": [dataset.items[i].key for i in r.clicked_items],
                        "ts": r.timestamp,
                    }
                    for r in user.search_history
                ],
            }
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")
    with items_path_for(path).open("w", encoding="utf-8") as fh:
        for item in dataset.items:
            fh.write(json.dumps({"item": item.key, "text": item.text}, ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass(frozen=True)
class SynthConfig:
    users: int = 200
    items: int = 500
    clusters: int = 4
    seed: int = 0
    words_per_cluster: int = 12
    shared_words: int = 6
    rec_len: tuple[int, int] = (5, 12)
    rich_search_len: tuple[int, int] = (6, 24)
    sparse_fraction: float = 0.5
    sparse_cap: int = 2
    in_cluster_prob: float = 0.9
    clicks_per_query: tuple[int, int] = (1, 2)
    popularity_exponent: float = 1.0


_ONSETS = "b d f g k l m n p r s t v z".split()
_VOWELS = "a e i o u".split()


def _make_words(rng: np.random.Generator, n: int) -> list[str]:
    out: list[str] = []
    seen: set[str] = set()
    while len(out) < n:
        syllables = rng.integers(2, 4)
        word = "".join(_ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))] for _ in range(syllables))
        if word not in seen:
            seen.add(word)
            out.append(word)
    return out


def generate_synthetic_dataset(config: SynthConfig) -> Dataset:
    """Cluster-structured S&R corpus with a controllable share of search-sparse users.

    Every user belongs to one latent interest cluster. Rec clicks and query
    words are drawn from that cluster with probability ``in_cluster_prob``;
    within a cluster item popularity follows a power law. Search clicks never
    repeat the user's own rec items.
    """
    c = config
    if c.clusters > c.items:
        raise ValueError("cluster count exceeds item count")
    if c.clusters < 1 or c.users < 1:
        raise ValueError("need at least one user and one cluster")
    rng = np.random.default_rng(c.seed)

    words = _make_words(rng, c.clusters * c.words_per_cluster + c.shared_words)
    cluster_words = [words[k * c.words_per_cluster:(k + 1) * c.words_per_cluster] for k in range(c.clusters)]
    generic = words[c.clusters * c.words_per_cluster:]

    item_cluster = np.empty(c.items, dtype=np.int64)
    perm = rng.permutation(c.items)
    for rank, item in enumerate(perm):
        item_cluster[item] = rank % c.clusters
    members = [np.flatnonzero(item_cluster == k) for k in range(c.clusters)]
    popularity = []
    for k in range(c.clusters):
        ranks = rng.permutation(len(members[k])) + 1
        w = ranks.astype(float) ** -c.popularity_exponent
        popularity.append(w / w.sum())

    item_texts = []
    for i in range(c.items):
        pool = cluster_words[item_cluster[i]]
        picked = rng.choice(len(pool), size=min(3, len(pool)), replace=False)
        text = [pool[j] for j in picked]
        if generic and rng.random() < 0.5:
            text.append(generic[rng.integers(len(generic))])
        item_texts.append(" ".join(text))

    def draw_item(cluster: int, exclude: set[int]) -> int:
        for _ in range(1000):
            if rng.random() < c.in_cluster_prob:
                i = int(members[cluster][rng.choice(len(members[cluster]), p=popularity[cluster])])
            else:
                i = int(rng.integers(c.items))
            if i not in exclude:
                return i
        candidates = [i for i in range(c.items) if i not in exclude]
        return int(candidates[rng.integers(len(candidates))])

    n_sparse = int(round(c.sparse_fraction * c.users))
    sparse_users = set(rng.permutation(c.users)[:n_sparse].tolist())
    user_cluster = rng.integers(c.clusters, size=c.users)

    vocab: dict[str, int] = {}
    queries: dict[tuple[int, ...], Query] = {}
    users = []
    for u in range(c.users):
        k = int(user_cluster[u])
        n_rec = min(int(rng.integers(c.rec_len[0], c.rec_len[1] + 1)), c.items)
        if u in sparse_users:
            n_search = int(rng.integers(0, c.sparse_cap + 1))
        else:
            lo = max(c.rich_search_len[0], c.sparse_cap + 1)
            n_search = int(rng.integers(lo, max(lo, c.rich_search_len[1]) + 1))
        rec: list[int] = []
        for _ in range(n_rec):
            rec.append(draw_item(k, set(rec)))
        order = rng.permutation(n_rec + n_search)
        stamps = 1000 * (u + 1) + np.arange(n_rec + n_search)
        rec_ts = sorted(int(stamps[p]) for p in order[:n_rec])
        search_ts = sorted(int(stamps[p]) for p in order[n_rec:])

        records = []
        for ts in search_ts:
            qk = k if rng.random() < c.in_cluster_prob else int(rng.integers(c.clusters))
            pool = cluster_words[qk]
            n_words = min(2, len(pool))
            tokens = [pool[j] for j in rng.choice(len(pool), size=n_words, replace=False)]
            wids = tuple(vocab.setdefault(t, len(vocab)) for t in tokens)
            query = queries.setdefault(wids, Query(len(queries), wids))
            n_clicks = int(rng.integers(c.clicks_per_query[0], c.clicks_per_query[1] + 1))
            n_clicks = min(n_clicks, c.items - n_rec)
            clicked: list[int] = []
            for _ in range(n_clicks):
                clicked.append(draw_item(qk, set(rec) | set(clicked)))
            records.append(SearchRecord(query, tuple(clicked), ts))
        users.append(
            UserHistory(
                user_id=u,
                key=f"u{u}",
                rec_history=tuple(rec),
                rec_timestamps=tuple(rec_ts),
                search_history=tuple(records),
            )
        )

    dataset = Dataset(
        users=tuple(users),
        items=tuple(Item(i, f"i{i}", item_texts[i]) for i in range(c.items)),
        vocab=tuple(vocab),
        queries=tuple(queries.values()),
        meta={"user_cluster": user_cluster.tolist(), "item_cluster": item_cluster.tolist(), "sparse_users": sorted(sparse_users)},
    )
    return leave_one_out_split(dataset)


def within_cluster_click_rate(dataset: Dataset) -> float:
    """Fraction of all clicks landing in the clicking user's generator cluster."""
    uc, ic = dataset.meta["user_cluster"], dataset.meta["item_cluster"]
    hits = total = 0
    for user in dataset.users:
        clicks: Iterable[int] = list(user.rec_history) + [i for r in user.search_history for i in r.clicked_items]
        for i in clicks:
            total += 1
            hits += ic[i] == uc[user.user_id]
    return hits / max(total, 1)


def validate_dataset(dataset: Dataset) -> list[str]:
    """Return a list of invariant violations (empty when the dataset is sound)."""
    problems = []
    n_items, n_words = dataset.n_items, dataset.n_words
    for item in dataset.items:
        if not 0 <= item.item_id < n_items:
            problems.append(f"item id out of range: {item.item_id}")
    for user in dataset.users:
        if list(user.rec_timestamps) != sorted(user.rec_timestamps):
            problems.append(f"user {user.key}: rec history not time-sorted")
        stamps = [r.timestamp for r in user.search_history]
        if stamps != sorted(stamps):
            problems.append(f"user {user.key}: search history not time-sorted")
        if any(not 0 <= i < n_items for i in user.rec_history):
            problems.append(f"user {user.key}: rec item out of range")
        for r in user.search_history:
            if any(not 0 <= w < n_words for w in r.query.words):
                problems.append(f"user {user.key}: query word out of range")
            if any(not 0 <= i < n_items for i in r.clicked_items):
                problems.append(f"user {user.key}: clicked item out of range")
        if len(user.split) != user.n_rec:
            problems.append(f"user {user.key}: split labels missing")
    return problems


def truncate(seq: Sequence, limit: int) -> Sequence:
    """Keep the most recent ``limit`` entries."""
    return seq[-limit:] if limit > 0 and len(seq) > limit else seq
