import csv
import json

import numpy as np
import pytest

from gserec.cli import main
from gserec.config import load_config
from gserec.metrics import MetricsReport
from gserec.quantizer import read_codes

QUICK = """\
embed_dim = 16
rq_levels = 2
rq_codebook_size = 4
rq_latent_dim = 8
rq_hidden = 32
rq_epochs = 10
rq_batch_size = 64
dim = 16
mlp_hidden = 16
epochs = 2
batch_size = 64
num_groups = 2
num_negatives = 20
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "quick.cfg").write_text(QUICK)
    return root


def _csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_cli_end_to_end(workdir, capsys):
    cfg = str(workdir / "quick.cfg")
    data = str(workdir / "data.jsonl")
    prefs = str(workdir / "prefs")
    assert main(["data", "synth", "--users", "30", "--items", "80", "--clusters", "3", "--seed", "1", "--out", data]) == 0
    assert main(["data", "validate", "--data", data]) == 0
    capsys.readouterr()

    assert main(["prefs", "summarize", "--data", data, "--cache", prefs, "--config", cfg]) == 0
    assert json.loads(capsys.readouterr().out)["summaries"] == 60
    assert main(["prefs", "embed", "--cache", prefs, "--config", cfg]) == 0
    assert json.loads(capsys.readouterr().out) == {"embedded": 60, "dim": 16}

    ckpt = str(workdir / "rq.gsr")
    codes = str(workdir / "codes.tsv")
    assert main(["quantize", "train", "--prefs", prefs, "--out", ckpt, "--config", cfg]) == 0
    assert main(["quantize", "export", "--ckpt", ckpt, "--prefs", prefs, "--out", codes]) == 0
    codes_s, codes_r = read_codes(codes)
    assert codes_s.shape == (30, 2) and codes_r.max() < 4
    capsys.readouterr()

    assert main(["graph", "stats", "--codes", codes, "--channel", "s"]) == 0
    stats = json.loads(capsys.readouterr().out)
    assert stats["nodes"] <= 30 + 2 * 4
    assert main(["graph", "build", "--codes", codes, "--channel", "r", "--out", str(workdir / "g.tsv")]) == 0

    model = str(workdir / "rec.gsr")
    trace = workdir / "trace.json"
    emb = workdir / "emb.npz"
    assert main(["train", "--data", data, "--codes", codes, "--out", model, "--config", cfg,
                 "--trace", str(trace), "--dump-embeddings", str(emb)]) == 0
    assert len(json.loads(trace.read_text())) == 2
    assert np.load(emb)["users_s"].shape == (30, 16)
    capsys.readouterr()

    report_path = workdir / "test.json"
    assert main(["eval", "--data", data, "--ckpt", model, "--out", str(report_path)]) == 0
    report = MetricsReport.load(report_path)
    assert report.rows == 30 and len(report.groups) == 2 and report.candidate_list_size == 21

    out = workdir / "report"
    assert main(["report", "--baseline", str(report_path), "--compare", f"same={report_path}",
                 "--data", data, "--out", str(out), "--config", cfg]) == 0
    rows = _csv(out / "fig2_improvements.csv")
    assert [r["group"] for r in rows] == ["all", "0", "1"]
    assert all(r["NDCG@5"] in ("0.0", "") for r in rows)
    assert sum(int(r["users"]) for r in _csv(out / "fig1_groups.csv")) == 30
    assert (out / "fig2_improvements.png").exists()


def test_cli_ablate_and_sweep(workdir, capsys):
    cfg = str(workdir / "quick.cfg")
    data = str(workdir / "small.jsonl")
    assert main(["data", "synth", "--users", "25", "--items", "60", "--clusters", "2", "--seed", "4", "--out", data]) == 0
    out = workdir / "ablate"
    assert main(["ablate", "--data", data, "--toggles", "no_mca", "--out", str(out), "--config", cfg]) == 0
    assert {p.name for p in out.glob("*.json")} == {"baseline.json", "no_mca.json"}
    assert {r["run"] for r in _csv(out / "fig2_improvements.csv")} == {"no_mca"}

    out = workdir / "sweep"
    assert main(["sweep", "--data", data, "--param", "lambda_his_cl", "--grid", "0,0.01", "--out", str(out), "--config", cfg]) == 0
    rows = _csv(out / "fig7_lambda_his_cl.csv")
    assert [float(r["value"]) for r in rows] == [0.0, 0.01]
    assert (out / "fig7_lambda_his_cl.png").exists()


def test_cli_replay_prefs(workdir, capsys):
    data = str(workdir / "replay.jsonl")
    assert main(["data", "synth", "--users", "10", "--items", "40", "--seed", "2", "--out", data]) == 0
    rec_dir, rep_dir = workdir / "recorded", workdir / "replayed"
    assert main(["prefs", "summarize", "--data", data, "--cache", str(rec_dir)]) == 0
    assert main(["prefs", "summarize", "--data", data, "--cache", str(rep_dir),
                 "--client", "replay", "--replay-dir", str(rec_dir)]) == 0
    assert (rec_dir / "summaries.jsonl").read_text() == (rep_dir / "summaries.jsonl").read_text()


def test_cli_config_overrides(workdir, capsys):
    assert main(["config", "--config", str(workdir / "quick.cfg"), "--set", "seed=9"]) == 0
    path = workdir / "echo.cfg"
    path.write_text(capsys.readouterr().out)
    cfg = load_config(path)
    assert cfg.seed == 9 and cfg.rq_hidden == (32,)
    with pytest.raises(ValueError):
        main(["config", "--set", "epochs=500"])
