import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gserec.data import Dataset, Item, Query, SearchRecord, UserHistory, leave_one_out_split
from gserec.prefs import (
    EMPTY_MARKER,
    REC,
    SEARCH,
    SEARCH_TEMPLATE,
    HashEmbedder,
    HttpEmbedder,
    HttpSummaryClient,
    MockSummaryClient,
    PipelineError,
    PreferenceRecord,
    ReplayClient,
    build_preferences,
    cache_key,
    embed_preference,
    load_prefs,
    read_vector,
    render_all,
    render_prompt,
    summarize_preferences,
    summary_context,
    write_vector,
)


def _jazz_dataset():
    items = (Item(0, "kob", "Kind of Blue"), Item(1, "ls", "A Love Supreme"))
    vocab = ("jazz", "vinyl")
    q = Query(0, (0, 1))
    user = UserHistory(0, "u", (1,), (1,), (SearchRecord(q, (0,), 0),))
    return Dataset((user,), items, vocab, (q,))


class CountingClient:
    client_id = "counting"

    def __init__(self, fail_on=None):
        self.calls = 0
        self.fail_on = fail_on or set()
        self.lock = threading.Lock()

    def summarize(self, prompt):
        with self.lock:
            self.calls += 1
        if any(tag in prompt for tag in self.fail_on):
            raise TimeoutError("simulated timeout")
        return "summary of " + str(len(prompt))


# -- rendering ---------------------------------------------------------------


def test_empty_search_history_uses_marker():
    ds = _jazz_dataset()
    user = UserHistory(0, "u", (1,), (1,), ())
    p = render_prompt(ds, user, SEARCH)
    assert p.text == SEARCH_TEMPLATE.replace("{history}", "(no search history)")
    assert EMPTY_MARKER[SEARCH] == "(no search history)"


def test_search_prompt_contains_query_and_click():
    ds = _jazz_dataset()
    p = render_prompt(ds, ds.users[0], SEARCH)
    assert "jazz vinyl" in p.text and "Kind of Blue" in p.text
    assert "{history}" not in p.text
    assert p.text.startswith("Please analyze the queries and clicked items in the user's search history")


def test_rec_window_keeps_last_fifty():
    items = tuple(Item(i, f"k{i}", f"title{i:03d}") for i in range(60))
    user = UserHistory(0, "u", tuple(range(60)), tuple(range(60)))
    ds = Dataset((user,), items, (), ())
    p = render_prompt(ds, user, REC, window=50)
    lines = [ln for ln in p.text.splitlines() if ln[:1].isdigit()]
    assert len(lines) == 50
    shown = [int(t[5:]) for t in p.text.split() if t.startswith("title")]
    assert shown == list(range(10, 60))


def test_summary_context_hides_heldout_items():
    items = tuple(Item(i, f"k{i}", f"t{i}") for i in range(6))
    q = Query(0, (0,))
    user = UserHistory(0, "u", (0, 1, 2, 3), (10, 20, 30, 40), (SearchRecord(q, (5,), 25), SearchRecord(q, (4,), 35)))
    ds = leave_one_out_split(Dataset((user,), items, ("w",), (Query(0, (0,)),)))
    visible = summary_context(ds.users[0])
    assert visible.rec_history == (0, 1)
    assert [r.timestamp for r in visible.search_history] == [25]
    text = " ".join(p.text for p in render_all(ds))
    assert "t5" in text
    assert "t2" not in text and "t3" not in text and "t4" not in text


@st.composite
def _histories(draw):
    n_items = 4
    return tuple(draw(st.lists(st.integers(0, n_items - 1), max_size=6)) for _ in range(2))


@settings(max_examples=100, deadline=None)
@given(_histories())
def test_rec_prompt_injective(pair):
    # items whose texts collide must still render differently
    items = tuple(Item(i, f"k{i}", "same text") for i in range(4))
    ds = Dataset((), items, (), ())
    a, b = (UserHistory(0, "u", tuple(h), tuple(range(len(h)))) for h in pair)
    pa, pb = render_prompt(ds, a, REC), render_prompt(ds, b, REC)
    assert (pa.text == pb.text) == (a.rec_history == b.rec_history)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 2), st.lists(st.integers(0, 2), unique=True, max_size=2)), max_size=4),
       st.lists(st.tuples(st.integers(0, 2), st.lists(st.integers(0, 2), unique=True, max_size=2)), max_size=4))
def test_search_prompt_injective(ha, hb):
    queries = (Query(0, (0,)), Query(1, (1,)), Query(2, (0, 1)))
    items = tuple(Item(i, f"k{i}", "") for i in range(3))
    ds = Dataset((), items, ("w0", "w1"), queries)

    def user(h):
        return UserHistory(0, "u", (), (), tuple(SearchRecord(queries[q], tuple(c), t) for t, (q, c) in enumerate(h)))

    same = [(q, tuple(c)) for q, c in ha] == [(q, tuple(c)) for q, c in hb]
    assert (render_prompt(ds, user(ha), SEARCH).text == render_prompt(ds, user(hb), SEARCH).text) == same


# -- mock summarizer ---------------------------------------------------------


def test_mock_is_pure_and_picks_frequent_words():
    client = MockSummaryClient()
    prompt = render_prompt(_jazz_dataset(), _jazz_dataset().users[0], SEARCH).text
    assert client.summarize(prompt) == client.summarize(prompt)
    words = client.summarize(prompt).split()
    assert len(words) <= 5
    assert "jazz" in words and "vinyl" in words
    assert "please" not in words


def test_mock_fallback_on_empty_history():
    p = render_prompt(_jazz_dataset(), UserHistory(0, "u", (), ()), SEARCH)
    assert MockSummaryClient().summarize(p.text) == "no stated preference"


def test_mock_orders_by_frequency():
    assert MockSummaryClient(top_k=2).summarize("kiwi apple kiwi banana banana kiwi") == "kiwi banana"


# -- caching and fault handling ----------------------------------------------


def _prompts(n):
    from gserec.prefs import PromptText

    return [PromptText(SEARCH, f"prompt number {i}", i) for i in range(n)]


def test_cache_hit_skips_client(tmp_path):
    client = CountingClient()
    p = _prompts(1)
    first = summarize_preferences(client, p, tmp_path)
    second = summarize_preferences(client, p, tmp_path)
    assert client.calls == 1
    assert first.records == second.records
    assert (tmp_path / f"{cache_key('counting', 'prompt number 0')}.summary.txt").exists()


def test_cache_key_is_sha256_of_client_and_text():
    import hashlib

    assert cache_key("c", "t") == hashlib.sha256(b"c\x00t").hexdigest()
    assert cache_key("c", "t") != cache_key("d", "t")


def test_failure_manifest_and_partial_progress(tmp_path):
    client = CountingClient(fail_on={"number 7"})
    result = summarize_preferences(client, _prompts(10), tmp_path, retries=3, workers=3)
    assert len(result.records) == 9
    assert len(result.failures) == 1 and result.failures[0]["user"] == 7
    manifest = (tmp_path / "failures.jsonl").read_text().splitlines()
    assert len(manifest) == 1 and json.loads(manifest[0])["user"] == 7
    assert client.calls == 9 + 4  # one call per success, 1 + 3 retries for the failure
    assert len(list(tmp_path.glob("*.summary.txt"))) == 9


def test_replay_reproduces_recorded_summaries(tmp_path):
    prompts = _prompts(3)
    rec_dir, replay_dir = tmp_path / "rec", tmp_path / "replay"
    recorded = summarize_preferences(MockSummaryClient(), prompts, rec_dir)
    replayed = summarize_preferences(ReplayClient(rec_dir, "mock"), prompts, replay_dir)
    assert [r.summary for r in replayed.records] == [r.summary for r in recorded.records]
    with pytest.raises(PipelineError):
        ReplayClient(rec_dir, "mock").summarize("never recorded")


# -- embeddings --------------------------------------------------------------


def test_hash_embedder_identity_and_norm():
    emb = HashEmbedder(16)
    v = emb.embed(["rock music fan", "rock music fan", "classical"])
    np.testing.assert_array_equal(v[0], v[1])
    cos = float(v[0] @ v[1] / (np.linalg.norm(v[0]) * np.linalg.norm(v[1])))
    assert cos == pytest.approx(1.0, abs=1e-6)
    np.testing.assert_allclose(np.linalg.norm(v, axis=1), 1.0, rtol=1e-6)


def test_vector_file_layout(tmp_path):
    vec = np.array([1.5, -2.0, 3.25], dtype=np.float32)
    path = tmp_path / "x.emb.f32"
    write_vector(path, vec)
    raw = path.read_bytes()
    assert raw[:4] == (3).to_bytes(4, "little")
    assert raw[4:] == vec.astype("<f4").tobytes()
    np.testing.assert_array_equal(read_vector(path), vec)


def test_embed_rejects_empty_summary():
    with pytest.raises(PipelineError):
        embed_preference([PreferenceRecord(0, SEARCH, "")], HashEmbedder(8))


def test_embed_dimension_mismatch_aborts():
    class Ragged:
        embedder_id = "ragged"

        def embed(self, texts):
            return np.zeros((len(texts) + 1, 4))

    with pytest.raises(PipelineError, match="shape"):
        embed_preference([PreferenceRecord(0, SEARCH, "a"), PreferenceRecord(1, SEARCH, "b")], Ragged())


def test_embed_rejects_nonfinite():
    class Bad:
        embedder_id = "bad"

        def embed(self, texts):
            return np.full((len(texts), 4), np.nan)

    with pytest.raises(PipelineError, match="non-finite"):
        embed_preference([PreferenceRecord(0, SEARCH, "a")], Bad())


def test_build_preferences_corpus_shape_and_replay(tmp_path, small_synth):
    ds = small_synth
    v_s, v_r, result = build_preferences(ds, MockSummaryClient(), HashEmbedder(16), tmp_path / "a")
    assert v_s.shape == v_r.shape == (ds.n_users, 16)
    assert np.isfinite(v_s).all() and np.isfinite(v_r).all()
    # identical prompts (e.g. several empty search histories) are summarized once
    assert result.calls == len({p.text for p in render_all(ds)})
    assert len(result.records) == 2 * ds.n_users
    # re-running with a replay client in a fresh cache reproduces the same vectors
    w_s, w_r, again = build_preferences(ds, ReplayClient(tmp_path / "a", "mock"), HashEmbedder(16), tmp_path / "b")
    np.testing.assert_array_equal(v_s, w_s)
    np.testing.assert_array_equal(v_r, w_r)
    loaded = load_prefs(tmp_path / "a")
    assert len(loaded) == 2 * ds.n_users


def test_build_preferences_raises_on_failures(tmp_path, small_synth):
    with pytest.raises(PipelineError, match="failed"):
        build_preferences(small_synth, CountingClient(fail_on={"Please"}), HashEmbedder(8), tmp_path, retries=0)


# -- HTTP clients against a local stub ---------------------------------------


class _Stub(BaseHTTPRequestHandler):
    requests = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        _Stub.requests.append((self.path, dict(self.headers), body))
        if self.path == "/chat":
            out = {"choices": [{"message": {"content": "  likes " + body["messages"][0]["content"][:5] + " "}}]}
        else:
            out = {"data": [{"index": i, "embedding": [float(len(t)), 1.0]} for i, t in reversed(list(enumerate(body["input"])))]}
        data = json.dumps(out).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


@pytest.fixture
def stub_server():
    server = HTTPServer(("127.0.0.1", 0), _Stub)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    _Stub.requests.clear()
    yield f"http://127.0.0.1:{server.server_port}"
    server.shutdown()


def test_http_summary_client(stub_server, monkeypatch):
    monkeypatch.setenv("GSEREC_LLM_URL", stub_server + "/chat")
    monkeypatch.setenv("GSEREC_LLM_MODEL", "m1")
    monkeypatch.setenv("GSEREC_LLM_KEY", "secret")
    client = HttpSummaryClient()
    assert client.summarize("hello world") == "likes hello"
    path, headers, body = _Stub.requests[0]
    assert body == {"model": "m1", "messages": [{"role": "user", "content": "hello world"}]}
    assert headers["Authorization"] == "Bearer secret"
    assert client.client_id == "http:m1"


def test_http_embedder_orders_by_index(stub_server, monkeypatch):
    monkeypatch.setenv("GSEREC_EMB_URL", stub_server + "/emb")
    monkeypatch.setenv("GSEREC_EMB_MODEL", "e1")
    monkeypatch.delenv("GSEREC_EMB_KEY", raising=False)
    vecs = HttpEmbedder().embed(["a", "abc"])
    np.testing.assert_array_equal(vecs, [[1.0, 1.0], [3.0, 1.0]])


def test_http_clients_need_url(monkeypatch):
    monkeypatch.delenv("GSEREC_LLM_URL", raising=False)
    monkeypatch.delenv("GSEREC_EMB_URL", raising=False)
    with pytest.raises(PipelineError):
        HttpSummaryClient()
    with pytest.raises(PipelineError):
        HttpEmbedder()
