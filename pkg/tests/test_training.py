import json
import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from gserec.archive import load_archive, save_archive
from gserec.config import ABLATIONS, TrainConfig
from gserec.data import TEST, VALID
from gserec.features import training_rows
from gserec.model import GSERec
from gserec.quantizer import TrainingDiverged
from gserec.training import (
    Recommender,
    dump_embeddings,
    evaluate_recommender,
    prepare_preferences,
    quantize_stage,
    run_ablation,
    run_pipeline,
    sweep,
    train,
)

QUICK = TrainConfig(
    seed=0, embed_dim=16, rq_levels=2, rq_codebook_size=4, rq_latent_dim=8, rq_hidden=(32,),
    rq_epochs=10, rq_batch_size=64, dim=16, mlp_hidden=(16,), epochs=2, batch_size=64,
    max_rec_len=8, max_search_len=8, num_groups=2, num_negatives=20,
)


@pytest.fixture(scope="module")
def stage(small_synth):
    prefs = prepare_preferences(small_synth, QUICK)
    return quantize_stage(prefs, QUICK)


def _ascending(rec, epoch):
    return float(epoch)


def test_smoke_run_and_checkpoint(tmp_path, small_synth, stage):
    result = train(small_synth, stage.codes_s, stage.codes_r, QUICK)
    assert [t["epoch"] for t in result.trace] == [1, 2]
    assert {"loss", "bce", "user_cl", "history_cl", "reg", "valid_ndcg5"} <= set(result.trace[0])
    rec = result.recommender
    path = rec.save(tmp_path / "rec.gsr")
    loaded = Recommender.load(path)
    assert loaded.config == QUICK and loaded.best_epoch == result.best_epoch
    assert loaded.trace == result.trace
    a = evaluate_recommender(rec, small_synth, TEST)
    b = evaluate_recommender(loaded, small_synth, TEST)
    assert a == b
    cands = np.arange(10)[None, :]
    np.testing.assert_array_equal(rec.score_rows(small_synth, [(0, None)], cands), loaded.score_rows(small_synth, [(0, None)], cands))


def test_early_stopping_restores_best(small_synth, stage):
    snapshots = {}

    def worsening(rec, epoch):
        snapshots[epoch] = {k: v.clone() for k, v in rec.model.state_dict().items()}
        return 1.0 / epoch

    cfg = replace(QUICK, epochs=10, patience=1)
    result = train(small_synth, stage.codes_s, stage.codes_r, cfg, validator=worsening)
    assert len(result.trace) == 2 and result.stopped_early and result.best_epoch == 1
    final = result.recommender.model.state_dict()
    assert all(torch.equal(final[k], snapshots[1][k]) for k in final)
    assert not all(torch.equal(final[k], snapshots[2][k]) for k in final)


def test_bce_falls(small_synth, stage):
    cfg = replace(QUICK, epochs=10, batch_size=16)
    result = train(small_synth, stage.codes_s, stage.codes_r, cfg, validator=_ascending)
    assert len(result.trace) == 10 and not result.stopped_early
    assert result.trace[9]["bce"] < result.trace[0]["bce"]


def test_training_is_deterministic(small_synth, stage):
    a = train(small_synth, stage.codes_s, stage.codes_r, QUICK).trace
    b = train(small_synth, stage.codes_s, stage.codes_r, QUICK).trace
    assert a == b


def test_non_finite_loss_aborts(monkeypatch, small_synth, stage):
    original = GSERec.total_loss
    calls = {"n": 0}
    rows_per_epoch = math.ceil(len(training_rows(small_synth)) / QUICK.batch_size)

    def poisoned(self, *args, **kwargs):
        parts = original(self, *args, **kwargs)
        calls["n"] += 1
        if calls["n"] > rows_per_epoch:
            return parts._replace(total=parts.total * float("nan"))
        return parts

    monkeypatch.setattr(GSERec, "total_loss", poisoned)
    with pytest.raises(TrainingDiverged, match="epoch 2") as info:
        train(small_synth, stage.codes_s, stage.codes_r, replace(QUICK, epochs=5), validator=_ascending)
    assert [t["epoch"] for t in info.value.trace] == [1]


def test_score_api(small_synth, stage):
    rec = train(small_synth, stage.codes_s, stage.codes_r, QUICK).recommender
    items = [3, 7, 11]
    batch = rec.score_batch(small_synth, 2, items)
    assert batch.shape == (3,) and np.all((batch > 0) & (batch < 1))
    singles = [rec.score(small_synth, 2, i) for i in items]
    np.testing.assert_allclose(batch, singles, rtol=1e-6)
    # a row cut at position 1 sees less history than the full one
    assert rec.score(small_synth, 2, 3, position=1) != pytest.approx(rec.score(small_synth, 2, 3), abs=0)


def test_dump_embeddings(tmp_path, small_synth, stage):
    rec = train(small_synth, stage.codes_s, stage.codes_r, QUICK).recommender
    with np.load(dump_embeddings(rec, tmp_path / "emb.npz")) as data:
        assert data["users_s"].shape == (small_synth.n_users, QUICK.dim)
        assert data["codes_r"].shape[1] == QUICK.dim and "items" in data


def test_pipeline_reports(small_synth, stage):
    result = run_pipeline(small_synth, QUICK, stage)
    assert result.valid.split == VALID and result.test.split == TEST
    assert len(result.test.groups) == 2
    assert result.test.config == QUICK.echo()
    assert result.test.candidate_list_size == 21


def test_ablation_cases(small_synth, stage):
    assert list(run_ablation(small_synth, QUICK, (), stage_one=stage)) == ["baseline"]
    with pytest.raises(ValueError):
        run_ablation(small_synth, QUICK, ("no_everything",), stage_one=stage)
    reports = run_ablation(small_synth, QUICK, ABLATIONS, stage_one=stage)
    assert list(reports) == ["baseline", *ABLATIONS]
    for name in ABLATIONS:
        assert reports[name].config[name] is True
        assert reports[name].rows == reports["baseline"].rows


def test_sweep_cases(small_synth, stage):
    with pytest.raises(ValueError):
        sweep(small_synth, QUICK, "lambda_u_cl", [], stage_one=stage)
    with pytest.raises(ValueError):
        sweep(small_synth, QUICK, "lr", [0.1], stage_one=stage)
    (point,) = sweep(small_synth, QUICK, "lambda_u_cl", [QUICK.lambda_u_cl], stage_one=stage)
    assert point.report == run_pipeline(small_synth, QUICK, stage).test
    points = sweep(small_synth, QUICK, "lambda_his_cl", [0.0, 1e-2], stage_one=stage)
    assert [p.config["lambda_his_cl"] for p in points] == [0.0, 1e-2]
    assert [p.row()["value"] for p in points] == [0.0, 1e-2]
    rq = sweep(small_synth, QUICK, "lambda_rq_cl", [0.0], stage_one=stage)
    assert rq[0].config["rq_lambda_cl"] == 0.0


def test_archive_rejects_wrong_kind(tmp_path):
    path = save_archive(tmp_path / "a.gsr", "quantizer", {"x": 1}, {"w": np.ones((2, 2)), "c": np.arange(3)}, {"m": [1]})
    manifest, arrays = load_archive(path, "quantizer")
    assert manifest["config"] == {"x": 1} and arrays["c"].dtype == np.int64
    np.testing.assert_array_equal(arrays["w"], np.ones((2, 2), dtype=np.float32))
    with pytest.raises(ValueError):
        load_archive(path, "recommender")
    json.loads(json.dumps(manifest))
