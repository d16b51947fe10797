import numpy as np
import torch

from gserec.data import Dataset, Item, Query, SearchRecord, UserHistory, leave_one_out_split
from gserec.features import FeatureLimits, NegativeSampler, build_batch, row_context, training_rows


def _user():
    q1, q2, q3 = Query(0, (0, 1)), Query(1, (2,)), Query(2, (1, 2, 3))
    searches = (
        SearchRecord(q1, (5,), 5),
        SearchRecord(q2, (6, 7), 20),
        SearchRecord(q3, (8,), 30),
    )
    return UserHistory(0, "u0", (0, 1, 2, 3), (10, 20, 30, 40), searches)


def _dataset():
    items = tuple(Item(i, f"i{i}") for i in range(12))
    user = _user()
    other = UserHistory(1, "u1", (4, 9, 10), (1, 2, 3))
    return leave_one_out_split(Dataset((user, other), items, ("a", "b", "c", "d"), ()))


def test_row_context_strictly_earlier_searches():
    user = _user()
    rec, search = row_context(user, 2)
    assert rec == (0, 1)
    # the search at ts 30 shares the row's timestamp and stays hidden
    assert [r.timestamp for r in search] == [5, 20]
    rec, search = row_context(user, None)
    assert rec == user.rec_history and len(search) == 3


def test_build_batch_layout():
    ds = _dataset()
    limits = FeatureLimits(max_rec_len=2, max_search_len=4, max_query_words=2, max_clicks=1)
    batch = build_batch(ds, [(0, 3), (1, 1)], limits)
    assert batch.user.tolist() == [0, 1]
    # most recent two rec items, left aligned
    assert batch.rec_items[0].tolist() == [1, 2] and batch.rec_mask[0].tolist() == [True, True]
    assert batch.rec_items[1].tolist() == [4, 0] and batch.rec_mask[1].tolist() == [True, False]
    assert batch.s_mask[0].tolist() == [True, True, True, False]
    assert batch.s_words[0, 2].tolist() == [1, 2]  # third query truncated to two words
    assert batch.s_word_mask[0, 1].tolist() == [True, False]
    assert batch.s_clicks[0, 1].tolist() == [6] and batch.s_click_mask[0, 1].tolist() == [True]
    assert not batch.s_mask[1].any()
    assert batch.rec_items.dtype == torch.int64


def test_build_batch_search_truncation_keeps_latest():
    ds = _dataset()
    batch = build_batch(ds, [(0, None)], FeatureLimits(max_search_len=2))
    assert batch.s_clicks[0, :, 0].tolist() == [6, 8]


def test_training_rows_need_a_prefix():
    ds = _dataset()
    rows = training_rows(ds)
    # user 0: train positions 0, 1 -> only 1 has history; user 1: only position 0 is train
    assert rows == [(0, 1)]


def test_negative_sampler_excludes_both_channels():
    ds = _dataset()
    sampler = NegativeSampler(ds)
    seen = {0, 1, 2, 3, 5, 6, 7, 8}
    assert sampler.eligible_count(0) == 12 - len(seen)
    rng = np.random.default_rng(0)
    for _ in range(50):
        draw = sampler.sample(0, 3, rng)
        assert len(set(draw.tolist())) == 3 and not seen & set(draw.tolist())
    assert sorted(sampler.sample(0, 99, rng).tolist()) == [4, 9, 10, 11]
    with_repl = sampler.sample(0, 40, rng, replace=True)
    assert len(with_repl) == 40 and not seen & set(with_repl.tolist())


def test_negative_sampler_large_catalog_path():
    items = tuple(Item(i, f"i{i}") for i in range(1000))
    user = UserHistory(0, "u", tuple(range(0, 100, 2)), tuple(range(50)))
    sampler = NegativeSampler(Dataset((user,), items, (), ()))
    draw = sampler.sample(0, 99, np.random.default_rng(3))
    assert len(set(draw.tolist())) == 99
    assert not set(draw.tolist()) & set(user.rec_history)


def test_negative_sampler_fully_seen_user():
    items = tuple(Item(i, f"i{i}") for i in range(3))
    user = UserHistory(0, "u", (0, 1, 2), (1, 2, 3))
    sampler = NegativeSampler(Dataset((user,), items, (), ()))
    assert sampler.sample(0, 5, np.random.default_rng(0)).size == 0
    assert sampler.sample(0, 5, np.random.default_rng(0), replace=True).size == 0
