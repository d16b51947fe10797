"""Flat run configuration with ``key=value`` file support and CLI overrides."""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Iterable, Mapping

from .model import ModelConfig
from .quantizer import QuantizerConfig

ABLATIONS = ("no_rq_cl", "no_uc_graph", "no_u_cl", "no_his_cl", "no_mca")


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0

    # preference summaries / embeddings
    embed_dim: int = 64
    prompt_window: int = 50
    summary_retries: int = 3
    workers: int = 4

    # quantizer
    rq_levels: int = 4
    rq_codebook_size: int = 256
    rq_latent_dim: int = 32
    rq_hidden: tuple[int, ...] = (256, 256)
    rq_lambda: float = 1.0
    rq_lambda_cl: float = 1e-4
    rq_tau: float = 0.1
    rq_epochs: int = 500
    rq_batch_size: int = 1024
    rq_lr: float = 1e-3

    # recommender
    dim: int = 32
    heads: int = 2
    dropout: float = 0.1
    layers: int = 2
    max_rec_len: int = 20
    max_search_len: int = 20
    max_query_words: int = 8
    max_clicks: int = 4
    mlp_hidden: tuple[int, ...] = (64, 32)
    tau_user: float = 0.1
    tau_history: float = 0.1

    # optimization
    epochs: int = 100
    batch_size: int = 1024
    lr: float = 1e-3
    lambda_reg: float = 1e-6
    lambda_u_cl: float = 1e-1
    lambda_his_cl: float = 1e-2
    patience: int = 10

    # evaluation
    num_negatives: int = 99
    num_groups: int = 4

    # ablation toggles
    no_rq_cl: bool = False
    no_uc_graph: bool = False
    no_u_cl: bool = False
    no_his_cl: bool = False
    no_mca: bool = False

    def __post_init__(self):
        if not 1 <= self.epochs <= 100:
            raise ValueError("epochs must be in [1, 100]")
        for name in ("lambda_reg", "lambda_u_cl", "lambda_his_cl", "rq_lambda", "rq_lambda_cl"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")

    def quantizer(self) -> QuantizerConfig:
        return QuantizerConfig(
            levels=self.rq_levels,
            codebook_size=self.rq_codebook_size,
            latent_dim=self.rq_latent_dim,
            hidden=tuple(self.rq_hidden),
            lambda_rq=self.rq_lambda,
            lambda_cl=self.rq_lambda_cl,
            tau=self.rq_tau,
            epochs=self.rq_epochs,
            batch_size=self.rq_batch_size,
            lr=self.rq_lr,
            contrastive=not self.no_rq_cl,
        )

    def model(self) -> ModelConfig:
        return ModelConfig(
            dim=self.dim,
            heads=self.heads,
            dropout=self.dropout,
            layers=self.layers,
            max_rec_len=self.max_rec_len,
            max_search_len=self.max_search_len,
            mlp_hidden=tuple(self.mlp_hidden),
            tau_user=self.tau_user,
            tau_history=self.tau_history,
            use_graph=not self.no_uc_graph,
            use_mca=not self.no_mca,
        )

    @property
    def effective_lambda_u_cl(self) -> float:
        # the alignment term lives on propagated embeddings, which the graph ablation removes
        return 0.0 if self.no_u_cl or self.no_uc_graph else self.lambda_u_cl

    @property
    def effective_lambda_his_cl(self) -> float:
        return 0.0 if self.no_his_cl or self.no_uc_graph else self.lambda_his_cl

    def with_ablation(self, toggle: str | None) -> "TrainConfig":
        if toggle is None:
            return self
        if toggle not in ABLATIONS:
            raise ValueError(f"unknown ablation toggle {toggle!r}; expected one of {ABLATIONS}")
        return replace(self, **{toggle: True})

    def echo(self) -> dict:
        return asdict(self)


_FIELDS = {f.name: f for f in fields(TrainConfig)}
_HINTS = typing.get_type_hints(TrainConfig)


def _coerce(name: str, raw: str):
    if name not in _FIELDS:
        raise KeyError(f"unknown config key {name!r}")
    hint = _HINTS[name]
    raw = raw.strip()
    if hint is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {raw!r}")
    if hint is int:
        return int(raw)
    if hint is float:
        return float(raw)
    if typing.get_origin(hint) is tuple:
        return tuple(int(x) for x in raw.replace(" ", "").split(",") if x)
    return raw


def parse_overrides(pairs: Iterable[str]) -> dict:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ValueError(f"expected key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        key = key.strip()
        out[key] = _coerce(key, value)
    return out


def load_config(path: str | Path | None = None, overrides: Iterable[str] = (), base: TrainConfig | None = None) -> TrainConfig:
    """Read a flat ``key = value`` file (``#`` comments) and apply overrides on top."""
    values: dict = {}
    if path is not None:
        for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                values.update(parse_overrides([line]))
            except (KeyError, ValueError) as exc:
                raise ValueError(f"{path}:{line_no}: {exc}") from exc
    values.update(parse_overrides(overrides))
    return replace(base or TrainConfig(), **values)


def config_from_dict(data: Mapping) -> TrainConfig:
    values = {}
    for key, value in data.items():
        if key not in _FIELDS:
            continue
        if typing.get_origin(_HINTS[key]) is tuple:
            value = tuple(value)
        values[key] = value
    return TrainConfig(**values)


def dump_config(config: TrainConfig) -> str:
    lines = []
    for f in dataclasses.fields(config):
        value = getattr(config, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"
