"""Two-stage orchestration: preferences and codes first, then the recommender.

Also hosts checkpointing, ablation runs and hyperparameter sweeps.
"""

from __future__ import annotations

import copy
import logging
import math
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .archive import load_archive, save_archive
from .config import ABLATIONS, TrainConfig, config_from_dict
from .data import TEST, VALID, Dataset, SparsityGrouping, group_users_by_search_count
from .features import FeatureLimits, NegativeSampler, build_batch, training_rows
from .metrics import MetricsReport, evaluate
from .model import GSERec
from .prefs import Embedder, HashEmbedder, MockSummaryClient, SummaryClient, build_preferences
from .quantizer import TrainedQuantizer, TrainingDiverged, export_codes, train_rqvae

logger = logging.getLogger(__name__)

SWEEP_PARAMS = {
    "lambda_rq_cl": "rq_lambda_cl",
    "lambda_u_cl": "lambda_u_cl",
    "lambda_his_cl": "lambda_his_cl",
}


def feature_limits(config: TrainConfig) -> FeatureLimits:
    return FeatureLimits(config.max_rec_len, config.max_search_len, config.max_query_words, config.max_clicks)


class Recommender:
    """A trained GSERec plus the config needed to rebuild and feed it."""

    def __init__(self, model: GSERec, config: TrainConfig, trace: list[dict] | None = None, best_epoch: int | None = None):
        self.model = model
        self.config = config
        self.trace = trace or []
        self.best_epoch = best_epoch
        self.limits = feature_limits(config)

    @torch.no_grad()
    def score_rows(self, dataset: Dataset, rows: Sequence[tuple[int, int | None]], candidates) -> np.ndarray:
        """Click probabilities (len(rows), C) with each row's context cut at its position."""
        self.model.eval()
        batch = build_batch(dataset, rows, self.limits)
        cands = torch.as_tensor(np.asarray(candidates), dtype=torch.long)
        return self.model(batch, cands).numpy()

    def scorer(self, dataset: Dataset) -> "_BoundScorer":
        return _BoundScorer(self, dataset)

    def score_batch(self, dataset: Dataset, user_id: int, item_ids: Sequence[int], position: int | None = None) -> np.ndarray:
        return self.score_rows(dataset, [(user_id, position)], [list(item_ids)])[0]

    def score(self, dataset: Dataset, user_id: int, item_id: int, position: int | None = None) -> float:
        return float(self.score_batch(dataset, user_id, [item_id], position)[0])

    def save(self, path: str | Path) -> Path:
        arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in self.model.state_dict().items()}
        codes_s, codes_r = self.model.raw_codes
        arrays["codes/s"] = np.asarray(codes_s, dtype=np.int64)
        arrays["codes/r"] = np.asarray(codes_r, dtype=np.int64)
        meta = {
            "n_users": self.model.n_users,
            "n_items": self.model.n_items,
            "n_words": self.model.n_words,
            "trace": self.trace,
            "best_epoch": self.best_epoch,
        }
        return save_archive(path, "recommender", self.config.echo(), arrays, meta)

    @classmethod
    def load(cls, path: str | Path) -> "Recommender":
        manifest, arrays = load_archive(path, "recommender")
        config = config_from_dict(manifest["config"])
        meta = manifest["meta"]
        model = GSERec(meta["n_users"], meta["n_items"], meta["n_words"], arrays["codes/s"], arrays["codes/r"], config.model())
        state = {k[len("param/"):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith("param/")}
        model.load_state_dict(state)
        model.eval()
        return cls(model, config, meta.get("trace", []), meta.get("best_epoch"))


@dataclass
class _BoundScorer:
    recommender: Recommender
    dataset: Dataset

    def score_rows(self, rows, candidates):
        return self.recommender.score_rows(self.dataset, rows, candidates)


def evaluate_recommender(
    recommender: Recommender,
    dataset: Dataset,
    split: str = TEST,
    grouping: SparsityGrouping | None = None,
) -> MetricsReport:
    c = recommender.config
    return evaluate(recommender.scorer(dataset), dataset, split, c.num_negatives, c.seed, grouping, c.echo())


# ---------------------------------------------------------------------------
# recommender training

Validator = Callable[[Recommender, int], float]


@dataclass
class TrainResult:
    recommender: Recommender
    trace: list[dict]
    best_epoch: int | None
    stopped_early: bool


def valid_ndcg5(dataset: Dataset) -> Validator:
    def validator(rec: Recommender, epoch: int) -> float:
        return evaluate_recommender(rec, dataset, VALID).overall["NDCG@5"]
    return validator


def train(
    dataset: Dataset,
    codes_s: np.ndarray,
    codes_r: np.ndarray,
    config: TrainConfig,
    validator: Validator | None = None,
) -> TrainResult:
    """Adam on BCE plus the alignment terms, one sampled negative per positive.

    Each epoch is validated (valid NDCG@5 by default); the best-scoring
    parameters are kept and training stops after ``patience`` epochs without
    improvement. Non-finite losses raise :class:`TrainingDiverged` with the
    trace so far attached.
    """
    c = config
    torch.manual_seed(c.seed)
    model = GSERec(dataset.n_users, dataset.n_items, dataset.n_words, codes_s, codes_r, c.model())
    rec = Recommender(model, c)
    if validator is None and dataset.rows(VALID):
        validator = valid_ndcg5(dataset)

    rows = training_rows(dataset)
    if not rows:
        raise ValueError("dataset has no trainable rows")
    full = build_batch(dataset, rows, rec.limits)
    positives = torch.as_tensor([dataset.users[u].rec_history[p] for u, p in rows], dtype=torch.long)
    sampler = NegativeSampler(dataset)
    opt = torch.optim.Adam(model.parameters(), lr=c.lr)
    lam_u, lam_h = c.effective_lambda_u_cl, c.effective_lambda_his_cl

    trace: list[dict] = []
    best_metric, best_epoch, best_state = -math.inf, None, None
    stale = 0
    stopped_early = False
    for epoch in range(1, c.epochs + 1):
        rng = np.random.default_rng([c.seed, epoch])
        order = torch.as_tensor(rng.permutation(len(rows)), dtype=torch.long)
        negatives = torch.as_tensor(
            np.concatenate([sampler.sample(u, 1, rng, replace=True) for u, _ in rows]), dtype=torch.long
        )
        model.train()
        sums = {"loss": 0.0, "bce": 0.0, "user_cl": 0.0, "history_cl": 0.0, "reg": 0.0}
        for start in range(0, len(rows), c.batch_size):
            idx = order[start:start + c.batch_size]
            batch = full.select(idx)
            cands = torch.stack([positives[idx], negatives[idx]], dim=1)
            labels = torch.zeros_like(cands, dtype=torch.float32)
            labels[:, 0] = 1.0
            parts = model.total_loss(batch, cands, labels, lam_u, lam_h, c.lambda_reg)
            if not torch.isfinite(parts.total):
                err = TrainingDiverged(f"non-finite recommender loss at epoch {epoch}")
                err.trace = trace
                raise err
            opt.zero_grad()
            parts.total.backward()
            opt.step()
            model.clamp_temperatures()
            w = len(idx) / len(rows)
            for key, value in zip(sums, parts):
                sums[key] += w * float(value.detach())
        entry = {"epoch": epoch, **sums}

        if validator is not None:
            metric = float(validator(rec, epoch))
            entry["valid_ndcg5"] = metric
            if metric > best_metric:
                best_metric, best_epoch, stale = metric, epoch, 0
                best_state = copy.deepcopy(model.state_dict())
            else:
                stale += 1
        trace.append(entry)
        logger.info("epoch %d: %s", epoch, entry)
        if validator is not None and stale >= c.patience:
            stopped_early = True
            break

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    rec.trace, rec.best_epoch = trace, best_epoch
    return TrainResult(rec, trace, best_epoch, stopped_early)


# ---------------------------------------------------------------------------
# stage one: preference embeddings and codes


@dataclass
class Preferences:
    v_s: np.ndarray
    v_r: np.ndarray
    summary_calls: int = 0


@dataclass
class StageOne:
    prefs: Preferences
    quantizer: TrainedQuantizer
    codes_s: np.ndarray
    codes_r: np.ndarray


def prepare_preferences(
    dataset: Dataset,
    config: TrainConfig,
    cache_dir: str | Path | None = None,
    client: SummaryClient | None = None,
    embedder: Embedder | None = None,
) -> Preferences:
    client = client or MockSummaryClient()
    embedder = embedder or HashEmbedder(config.embed_dim)
    if cache_dir is None:
        with tempfile.TemporaryDirectory() as tmp:
            v_s, v_r, result = build_preferences(dataset, client, embedder, tmp, config.prompt_window, config.summary_retries, config.workers)
    else:
        v_s, v_r, result = build_preferences(dataset, client, embedder, cache_dir, config.prompt_window, config.summary_retries, config.workers)
    return Preferences(v_s, v_r, result.calls)


def quantize_stage(prefs: Preferences, config: TrainConfig) -> StageOne:
    quantizer = train_rqvae(prefs.v_s, prefs.v_r, config.quantizer(), seed=config.seed)
    codes_s, codes_r = export_codes(quantizer, prefs.v_s, prefs.v_r)
    return StageOne(prefs, quantizer, codes_s, codes_r)


def run_stage_one(dataset: Dataset, config: TrainConfig, cache_dir=None, client=None, embedder=None) -> StageOne:
    return quantize_stage(prepare_preferences(dataset, config, cache_dir, client, embedder), config)


# ---------------------------------------------------------------------------
# end-to-end runs


@dataclass
class PipelineResult:
    config: TrainConfig
    stage_one: StageOne
    training: TrainResult
    valid: MetricsReport | None
    test: MetricsReport
    grouping: SparsityGrouping | None = None

    @property
    def recommender(self) -> Recommender:
        return self.training.recommender


def sparsity_grouping(dataset: Dataset, config: TrainConfig) -> SparsityGrouping | None:
    if config.num_groups < 2:
        return None
    return group_users_by_search_count(dataset, config.num_groups)


def run_pipeline(
    dataset: Dataset,
    config: TrainConfig,
    stage_one: StageOne | None = None,
    cache_dir=None,
    validator: Validator | None = None,
) -> PipelineResult:
    if stage_one is None:
        stage_one = run_stage_one(dataset, config, cache_dir)
    result = train(dataset, stage_one.codes_s, stage_one.codes_r, config, validator)
    grouping = sparsity_grouping(dataset, config)
    valid = evaluate_recommender(result.recommender, dataset, VALID, grouping) if dataset.rows(VALID) else None
    test = evaluate_recommender(result.recommender, dataset, TEST, grouping)
    return PipelineResult(config, stage_one, result, valid, test, grouping)


def run_ablation(
    dataset: Dataset,
    base_config: TrainConfig,
    toggles: Sequence[str] = (),
    prefs: Preferences | None = None,
    stage_one: StageOne | None = None,
) -> dict[str, MetricsReport]:
    """Baseline plus one run per toggle; returns test reports keyed by name.

    Preferences are shared across every run. The quantizer is shared too,
    except for ``no_rq_cl`` which retrains it without the contrastive term.
    """
    for t in toggles:
        if t not in ABLATIONS:
            raise ValueError(f"unknown ablation toggle {t!r}; expected one of {ABLATIONS}")
    if prefs is None:
        prefs = stage_one.prefs if stage_one is not None else prepare_preferences(dataset, base_config)
    if stage_one is None:
        stage_one = quantize_stage(prefs, base_config)
    reports = {"baseline": run_pipeline(dataset, base_config, stage_one).test}
    for t in toggles:
        cfg = base_config.with_ablation(t)
        s1 = quantize_stage(prefs, cfg) if t == "no_rq_cl" else stage_one
        reports[t] = run_pipeline(dataset, cfg, s1).test
    return reports


@dataclass
class SweepPoint:
    param: str
    value: float
    report: MetricsReport
    config: dict = field(default_factory=dict)

    def row(self) -> dict:
        return {
            "param": self.param,
            "value": self.value,
            "NDCG@5": self.report.overall["NDCG@5"],
            "HR@5": self.report.overall["HR@5"],
        }


def sweep(
    dataset: Dataset,
    config: TrainConfig,
    param: str,
    grid: Sequence[float],
    prefs: Preferences | None = None,
    stage_one: StageOne | None = None,
) -> list[SweepPoint]:
    """One full run per grid value of ``param`` with everything else held fixed."""
    if param not in SWEEP_PARAMS:
        raise ValueError(f"unknown sweep parameter {param!r}; expected one of {tuple(SWEEP_PARAMS)}")
    if len(grid) == 0:
        raise ValueError("sweep grid is empty")
    if prefs is None:
        prefs = stage_one.prefs if stage_one is not None else prepare_preferences(dataset, config)
    points = []
    for value in grid:
        cfg = replace(config, **{SWEEP_PARAMS[param]: float(value)})
        if param == "lambda_rq_cl" or stage_one is None:
            s1 = quantize_stage(prefs, cfg)
            if param != "lambda_rq_cl":
                stage_one = s1
        else:
            s1 = stage_one
        report = run_pipeline(dataset, cfg, s1).test
        points.append(SweepPoint(param, float(value), report, cfg.echo()))
    return points


def dump_embeddings(recommender: Recommender, path: str | Path) -> Path:
    """Raw propagated user and code tables (plus item table) as an .npz file."""
    model = recommender.model
    with torch.no_grad():
        out = {"items": model.item_emb.weight.numpy(), "users": model.user_emb.weight.numpy()}
        if model.config.use_graph:
            ps, pr = model.propagated()
            out.update(users_s=ps.users.numpy(), users_r=pr.users.numpy(), codes_s=ps.codes.numpy(), codes_r=pr.codes.numpy())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, **out)
    return path
