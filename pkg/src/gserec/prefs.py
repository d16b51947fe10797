"""Prompt rendering, cached LLM preference summaries and frozen text embeddings."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import struct
import tempfile
import threading
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from .data import Dataset, UserHistory, VALID, truncate

logger = logging.getLogger(__name__)

SEARCH, REC = "search", "rec"
KINDS = (SEARCH, REC)

SEARCH_TEMPLATE = (
    "Please analyze the queries and clicked items in the user's search history, and summarize "
    "the user's interest topics, areas of focus, style tendencies, or preference types. "
    "Here is the user's search history {history}, where each record contains the user's query "
    "and the items the user clicked on under that query."
)
REC_TEMPLATE = (
    "Please analyze the provided user recommendation history and summarize the user's possible "
    "interests, style tendencies, and preferred item types. "
    "Here is the user's recommendation history {history}, where each record represents an item "
    "the user has clicked on."
)
EMPTY_MARKER = {SEARCH: "(no search history)", REC: "(no recommendation history)"}
DEFAULT_WINDOW = 50


class PipelineError(RuntimeError):
    pass


@dataclass(frozen=True)
class PromptText:
    kind: str
    text: str
    user_id: int


@dataclass(frozen=True)
class PreferenceRecord:
    user_id: int
    kind: str
    summary: str
    embedding: np.ndarray | None = None


# ---------------------------------------------------------------------------
# prompts


def _item_label(dataset: Dataset, item_id: int) -> str:
    item = dataset.items[item_id]
    # the key keeps distinct histories distinct even when item texts collide
    return f"{item.text} [{item.key}]" if item.text else f"[{item.key}]"


def summary_context(user: UserHistory) -> UserHistory:
    """History visible to the summarizer: everything before the held-out items."""
    cut = user.position_of(VALID)
    if cut is None:
        return user
    ts = user.rec_timestamps[cut]
    return UserHistory(
        user_id=user.user_id,
        key=user.key,
        rec_history=user.rec_history[:cut],
        rec_timestamps=user.rec_timestamps[:cut],
        search_history=user.search_before(ts),
    )


def render_prompt(dataset: Dataset, history: UserHistory, kind: str, window: int = DEFAULT_WINDOW) -> PromptText:
    if kind == SEARCH:
        records = truncate(history.search_history, window)
        lines = [
            f"{n}. query: {dataset.query_text(r.query)}; clicked: "
            + "; ".join(_item_label(dataset, i) for i in r.clicked_items)
            for n, r in enumerate(records, 1)
        ]
        template = SEARCH_TEMPLATE
    elif kind == REC:
        items = truncate(history.rec_history, window)
        lines = [f"{n}. {_item_label(dataset, i)}" for n, i in enumerate(items, 1)]
        template = REC_TEMPLATE
    else:
        raise ValueError(f"unknown prompt kind {kind!r}")
    body = "\n" + "\n".join(lines) + "\n" if lines else EMPTY_MARKER[kind]
    return PromptText(kind, template.replace("{history}", body), history.user_id)


def render_all(dataset: Dataset, window: int = DEFAULT_WINDOW) -> list[PromptText]:
    prompts = []
    for user in dataset.users:
        visible = summary_context(user)
        prompts.extend(render_prompt(dataset, visible, kind, window) for kind in KINDS)
    return prompts


# ---------------------------------------------------------------------------
# summary clients


class SummaryClient(Protocol):
    client_id: str

    def summarize(self, prompt: str) -> str: ...


_TEMPLATE_WORDS = set(re.findall(r"[a-z']+", (SEARCH_TEMPLATE + " " + REC_TEMPLATE).lower()))
_STOPWORDS = {"a", "an", "and", "the", "of", "to", "in", "on", "for", "with", "no", "or", "is", "query", "clicked", "history"}
_TOKEN = re.compile(r"[^\W\d_]+(?:'[^\W\d_]+)?|\S+")
MOCK_FALLBACK = "no stated preference"


class MockSummaryClient:
    """Top-5 most frequent content words of the prompt, most frequent first.

    Ties keep first-appearance order. A pure function of the prompt text.
    """

    client_id = "mock"

    def __init__(self, top_k: int = 5):
        self.top_k = top_k

    def summarize(self, prompt: str) -> str:
        counts: Counter[str] = Counter()
        for token in _TOKEN.findall(prompt.lower()):
            token = token.strip(".,;:()[]")
            if not token.isalpha() or token in _TEMPLATE_WORDS or token in _STOPWORDS:
                continue
            counts[token] += 1
        words = [w for w, _ in counts.most_common(self.top_k)]
        return " ".join(words) if words else MOCK_FALLBACK


class HttpSummaryClient:
    """Single-turn chat completion against an OpenAI-compatible endpoint."""

    def __init__(self, url: str | None = None, model: str | None = None, api_key: str | None = None, timeout: float = 60.0):
        self.url = url or os.environ.get("GSEREC_LLM_URL", "")
        self.model = model or os.environ.get("GSEREC_LLM_MODEL", "")
        self.api_key = api_key if api_key is not None else os.environ.get("GSEREC_LLM_KEY", "")
        self.timeout = timeout
        if not self.url:
            raise PipelineError("GSEREC_LLM_URL is not set")

    @property
    def client_id(self) -> str:
        return f"http:{self.model}"

    def summarize(self, prompt: str) -> str:
        import requests

        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        payload = {"model": self.model, "messages": [{"role": "user", "content": prompt}]}
        resp = requests.post(self.url, json=payload, headers=headers, timeout=self.timeout)
        resp.raise_for_status()
        return resp.json()["choices"][0]["message"]["content"].strip()


class ReplayClient:
    """Serves summaries recorded in an earlier cache directory; never calls out."""

    def __init__(self, record_dir: str | Path, source_id: str = "mock"):
        self.record_dir = Path(record_dir)
        self.client_id = source_id

    def summarize(self, prompt: str) -> str:
        path = self.record_dir / f"{cache_key(self.client_id, prompt)}.summary.txt"
        if not path.exists():
            raise PipelineError(f"no recorded summary for prompt key {path.stem}")
        return path.read_text(encoding="utf-8")


# ---------------------------------------------------------------------------
# embedders


class Embedder(Protocol):
    embedder_id: str

    def embed(self, texts: Sequence[str]) -> np.ndarray: ...


class HashEmbedder:
    """Signed feature hashing of words and character trigrams, L2-normalized."""

    def __init__(self, dim: int = 64):
        self.dim = dim
        self.embedder_id = f"hash{dim}"

    def _features(self, text: str) -> Iterable[str]:
        for word in text.lower().split():
            yield "w:" + word
            padded = f"<{word}>"
            for i in range(len(padded) - 2):
                yield "c:" + padded[i:i + 3]

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dim), dtype=np.float32)
        for row, text in enumerate(texts):
            for feat in self._features(text):
                h = hashlib.blake2b(feat.encode(), digest_size=8).digest()
                bucket = int.from_bytes(h[:4], "little") % self.dim
                sign = 1.0 if h[4] & 1 else -1.0
                out[row, bucket] += sign * (2.0 if feat.startswith("w:") else 1.0)
            norm = np.linalg.norm(out[row])
            if norm > 0:
                out[row] /= norm
        return out


class HttpEmbedder:
    """OpenAI-compatible ``/embeddings`` endpoint (GSEREC_EMB_URL/_MODEL/_KEY)."""

    def __init__(self, url: str | None = None, model: str | None = None, api_key: str | None = None, timeout: float = 60.0):
        self.url = url or os.environ.get("GSEREC_EMB_URL", "")
        self.model = model or os.environ.get("GSEREC_EMB_MODEL", "")
        self.api_key = api_key if api_key is not None else os.environ.get("GSEREC_EMB_KEY", "")
        self.timeout = timeout
        if not self.url:
            raise PipelineError("GSEREC_EMB_URL is not set")

    @property
    def embedder_id(self) -> str:
        return f"http:{self.model}"

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        import requests

        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        resp = requests.post(self.url, json={"model": self.model, "input": list(texts)}, headers=headers, timeout=self.timeout)
        resp.raise_for_status()
        rows = sorted(resp.json()["data"], key=lambda d: d.get("index", 0))
        return np.asarray([r["embedding"] for r in rows], dtype=np.float32)


# ---------------------------------------------------------------------------
# cache


def cache_key(client_id: str, text: str) -> str:
    h = hashlib.sha256()
    h.update(client_id.encode("utf-8"))
    h.update(b"\x00")
    h.update(text.encode("utf-8"))
    return h.hexdigest()


def _atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_vector(path: Path, vec: np.ndarray) -> None:
    vec = np.ascontiguousarray(vec, dtype="<f4")
    _atomic_write(path, struct.pack("<I", vec.size) + vec.tobytes())


def read_vector(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    (n,) = struct.unpack("<I", raw[:4])
    vec = np.frombuffer(raw[4:], dtype="<f4")
    if vec.size != n:
        raise PipelineError(f"{path}: header says {n} floats, found {vec.size}")
    return vec.astype(np.float32)


@dataclass
class SummaryResult:
    records: list[PreferenceRecord]
    failures: list[dict]
    calls: int


def summarize_preferences(
    client: SummaryClient,
    prompts: Sequence[PromptText],
    cache_dir: str | Path,
    retries: int = 3,
    workers: int = 4,
) -> SummaryResult:
    """Summarize every prompt, reading and filling the on-disk cache.

    Failed prompts are retried ``retries`` times and then reported in
    ``failures.jsonl``; the rest of the batch still completes.
    """
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    calls = 0
    lock = threading.Lock()

    def work(prompt: PromptText):
        nonlocal calls
        path = cache_dir / f"{cache_key(client.client_id, prompt.text)}.summary.txt"
        if path.exists():
            return prompt, path.read_text(encoding="utf-8"), None
        last_error = None
        for _ in range(retries + 1):
            with lock:
                calls += 1
            try:
                summary = client.summarize(prompt.text)
            except Exception as exc:  # client faults are data, not crashes
                last_error = exc
                continue
            _atomic_write(path, summary.encode("utf-8"))
            return prompt, summary, None
        return prompt, None, last_error

    # identical prompt texts share one cache entry, so dispatch each text once
    unique = list({p.text: p for p in prompts}.values())
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        outcome = {prompt.text: (summary, error) for prompt, summary, error in pool.map(work, unique)}

    records, failures = [], []
    for prompt in prompts:
        summary, error = outcome[prompt.text]
        if error is not None or summary is None:
            failures.append({"user": prompt.user_id, "kind": prompt.kind, "error": repr(error)})
            logger.warning("summary failed for user %s (%s): %r", prompt.user_id, prompt.kind, error)
        else:
            records.append(PreferenceRecord(prompt.user_id, prompt.kind, summary))
    with (cache_dir / "failures.jsonl").open("w", encoding="utf-8") as fh:
        for f in failures:
            fh.write(json.dumps(f) + "\n")
    return SummaryResult(records, failures, calls)


def embed_preference(
    records: Sequence[PreferenceRecord],
    embedder: Embedder,
    cache_dir: str | Path | None = None,
) -> list[PreferenceRecord]:
    """Attach frozen embeddings to summaries, caching ``<sha256>.emb.f32`` files."""
    if not records:
        return []
    for r in records:
        if not r.summary:
            raise PipelineError(f"empty summary for user {r.user_id} ({r.kind})")
    cache = Path(cache_dir) if cache_dir is not None else None
    if cache is not None:
        cache.mkdir(parents=True, exist_ok=True)
    keys = [cache_key(embedder.embedder_id, r.summary) for r in records]
    vectors: dict[str, np.ndarray] = {}
    missing = []
    for key, r in zip(keys, records):
        path = cache / f"{key}.emb.f32" if cache is not None else None
        if path is not None and path.exists():
            vectors[key] = read_vector(path)
        elif key not in vectors and key not in {k for k, _ in missing}:
            missing.append((key, r.summary))
    if missing:
        fresh = np.asarray(embedder.embed([s for _, s in missing]), dtype=np.float32)
        if fresh.ndim != 2 or fresh.shape[0] != len(missing):
            raise PipelineError(f"embedder returned shape {fresh.shape} for {len(missing)} texts")
        for (key, _), vec in zip(missing, fresh):
            vectors[key] = vec
            if cache is not None:
                write_vector(cache / f"{key}.emb.f32", vec)
    dims = {v.shape[0] for v in vectors.values()}
    if len(dims) != 1:
        raise PipelineError(f"embedding dimension mismatch across batch: {sorted(dims)}")
    out = []
    for key, r in zip(keys, records):
        vec = vectors[key]
        if not np.all(np.isfinite(vec)):
            raise PipelineError(f"non-finite embedding for user {r.user_id} ({r.kind})")
        out.append(PreferenceRecord(r.user_id, r.kind, r.summary, vec.copy()))
    return out


# ---------------------------------------------------------------------------
# preference directory (index + cache files) consumed by the quantizer


def write_prefs_index(prefs_dir: str | Path, records: Sequence[PreferenceRecord], embedder_id: str) -> Path:
    prefs_dir = Path(prefs_dir)
    prefs_dir.mkdir(parents=True, exist_ok=True)
    path = prefs_dir / "index.jsonl"
    with path.open("w", encoding="utf-8") as fh:
        for r in sorted(records, key=lambda r: (r.user_id, r.kind)):
            fh.write(json.dumps({
                "user": r.user_id,
                "kind": r.kind,
                "emb_key": cache_key(embedder_id, r.summary),
                "summary": r.summary,
            }) + "\n")
    return path


def load_prefs(prefs_dir: str | Path) -> list[PreferenceRecord]:
    prefs_dir = Path(prefs_dir)
    out = []
    with (prefs_dir / "index.jsonl").open(encoding="utf-8") as fh:
        for line in fh:
            obj = json.loads(line)
            vec = read_vector(prefs_dir / f"{obj['emb_key']}.emb.f32")
            out.append(PreferenceRecord(obj["user"], obj["kind"], obj["summary"], vec))
    return out


def preference_matrices(records: Sequence[PreferenceRecord], n_users: int) -> tuple[np.ndarray, np.ndarray]:
    """Stack records into (v_s, v_r) matrices indexed by user id."""
    by_key = {(r.user_id, r.kind): r for r in records}
    mats = []
    for kind in KINDS:
        rows = []
        for u in range(n_users):
            r = by_key.get((u, kind))
            if r is None or r.embedding is None:
                raise PipelineError(f"user {u} is missing a {kind} preference embedding")
            rows.append(r.embedding)
        mats.append(np.stack(rows).astype(np.float32))
    return mats[0], mats[1]


def build_preferences(
    dataset: Dataset,
    client: SummaryClient,
    embedder: Embedder,
    cache_dir: str | Path,
    window: int = DEFAULT_WINDOW,
    retries: int = 3,
    workers: int = 4,
) -> tuple[np.ndarray, np.ndarray, SummaryResult]:
    """Render, summarize and embed both channels for every user."""
    prompts = render_all(dataset, window)
    result = summarize_preferences(client, prompts, cache_dir, retries=retries, workers=workers)
    if result.failures:
        raise PipelineError(f"{len(result.failures)} summaries failed; see {Path(cache_dir) / 'failures.jsonl'}")
    records = embed_preference(result.records, embedder, cache_dir)
    write_prefs_index(cache_dir, records, embedder.embedder_id)
    v_s, v_r = preference_matrices(records, dataset.n_users)
    return v_s, v_r, result
