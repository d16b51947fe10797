"""Dual residual-quantized autoencoder turning preference embeddings into codes.

One encoder/decoder pair and one stack of L codebooks per channel (search,
rec). The two latents are pulled together with an InfoNCE term before being
quantized level by level against the running residual.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import torch
from torch import nn

from .archive import load_archive, save_archive
from .losses import TEMPERATURE_RANGE, info_nce

logger = logging.getLogger(__name__)

CHANNELS = ("s", "r")


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class QuantizerConfig:
    levels: int = 4
    codebook_size: int = 256
    latent_dim: int = 32
    hidden: tuple[int, ...] = (256, 256)
    lambda_rq: float = 1.0
    lambda_cl: float = 1e-4
    tau: float = 0.1
    epochs: int = 500
    batch_size: int = 1024
    lr: float = 1e-3
    kmeans_init: bool = True
    restart_dead: bool = True
    contrastive: bool = True

    def __post_init__(self):
        if self.levels < 1 or self.codebook_size < 2 or self.latent_dim < 1:
            raise ValueError("need levels >= 1, codebook_size >= 2, latent_dim >= 1")
        if self.lambda_rq < 0 or self.lambda_cl < 0:
            raise ValueError("loss weights must be non-negative")


class RQOutput(NamedTuple):
    codes: torch.Tensor       # (..., L) long
    quantized: torch.Tensor   # (..., d) sum of selected code vectors
    residuals: torch.Tensor   # (..., L+1, d); residuals[..., 0, :] is the input


def residual_quantize(z: torch.Tensor, codebooks: torch.Tensor | Sequence[torch.Tensor]) -> RQOutput:
    """Greedy residual quantization of ``z`` against per-level codebooks.

    At each level the code minimizing the squared distance to the current
    residual is chosen (lowest index on ties) and subtracted. Code vectors are
    detached inside the residual recursion so that residuals carry gradient
    to ``z`` only; ``quantized`` keeps the codebook gradient.
    """
    residual = z
    codes, picked, residuals = [], [], [z]
    for book in codebooks:
        dist = (residual.unsqueeze(-2) - book).pow(2).sum(-1)
        idx = dist.argmin(dim=-1)
        vec = book[idx]
        codes.append(idx)
        picked.append(vec)
        residual = residual - vec.detach()
        residuals.append(residual)
    quantized = torch.stack(picked, dim=-2).sum(-2)
    return RQOutput(torch.stack(codes, dim=-1), quantized, torch.stack(residuals, dim=-2))


def rq_contrastive_loss(z_s: torch.Tensor, z_r: torch.Tensor, tau) -> torch.Tensor:
    return info_nce(z_s, z_r, tau)


def reconstruction_loss(v: Sequence[torch.Tensor], v_hat: Sequence[torch.Tensor]) -> torch.Tensor:
    """Squared error summed over channels and dimensions, averaged over users."""
    return sum((a - b).pow(2).sum(-1) for a, b in zip(v, v_hat)).mean()


def quantization_loss(residuals: torch.Tensor, codes: torch.Tensor, codebooks: torch.Tensor) -> torch.Tensor:
    """Codebook + commitment terms for one channel, summed over levels, mean over users.

    The first term moves only the codebook, the second only the residual.
    """
    total = residuals.new_zeros(residuals.shape[0])
    for level in range(codes.shape[-1]):
        r = residuals[:, level]
        e = codebooks[level][codes[:, level]]
        total = total + (r.detach() - e).pow(2).sum(-1) + (r - e.detach()).pow(2).sum(-1)
    return total.mean()


def rq_losses(v, v_hat, residuals, codes, codebooks) -> tuple[torch.Tensor, torch.Tensor]:
    """(reconstruction, quantization) losses; every argument is a per-channel sequence."""
    recon = reconstruction_loss(v, v_hat)
    rq = sum(quantization_loss(r, c, b) for r, c, b in zip(residuals, codes, codebooks))
    return recon, rq


def mlp(sizes: Sequence[int]) -> nn.Sequential:
    layers: list[nn.Module] = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(nn.Linear(a, b))
        if i < len(sizes) - 2:
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


class LossParts(NamedTuple):
    total: torch.Tensor
    recon: torch.Tensor
    rq: torch.Tensor
    cl: torch.Tensor
    codes: tuple[torch.Tensor, torch.Tensor]
    residuals: tuple[torch.Tensor, torch.Tensor]


class DualRQVAE(nn.Module):
    def __init__(self, input_dim: int, config: QuantizerConfig):
        super().__init__()
        self.config = config
        self.input_dim = input_dim
        c = config
        enc = [input_dim, *c.hidden, c.latent_dim]
        dec = [c.latent_dim, *reversed(c.hidden), input_dim]
        self.encoders = nn.ModuleDict({ch: mlp(enc) for ch in CHANNELS})
        self.decoders = nn.ModuleDict({ch: mlp(dec) for ch in CHANNELS})
        std = 1.0 / math.sqrt(c.latent_dim)
        self.codebooks = nn.ParameterDict(
            {ch: nn.Parameter(torch.randn(c.levels, c.codebook_size, c.latent_dim) * std) for ch in CHANNELS}
        )
        self.tau = nn.Parameter(torch.tensor(float(c.tau)))

    def encode(self, v_s: torch.Tensor, v_r: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.encoders["s"](v_s), self.encoders["r"](v_r)

    def quantize(self, z: torch.Tensor, channel: str) -> RQOutput:
        return residual_quantize(z, self.codebooks[channel])

    def objective(self, v_s: torch.Tensor, v_r: torch.Tensor) -> LossParts:
        c = self.config
        z = dict(zip(CHANNELS, self.encode(v_s, v_r)))
        outs = {ch: self.quantize(z[ch], ch) for ch in CHANNELS}
        # straight-through: decoders see the quantized value, encoders get its gradient
        v_hat = [self.decoders[ch](z[ch] + (outs[ch].quantized - z[ch]).detach()) for ch in CHANNELS]
        recon, rq = rq_losses(
            (v_s, v_r),
            v_hat,
            [outs[ch].residuals for ch in CHANNELS],
            [outs[ch].codes for ch in CHANNELS],
            [self.codebooks[ch] for ch in CHANNELS],
        )
        if c.contrastive:
            cl = rq_contrastive_loss(z["s"], z["r"], self.tau)
        else:
            cl = recon.new_zeros(())
        total = recon + c.lambda_rq * rq
        if c.contrastive:
            total = total + c.lambda_cl * cl
        return LossParts(
            total, recon, rq, cl,
            (outs["s"].codes, outs["r"].codes),
            (outs["s"].residuals, outs["r"].residuals),
        )

    @torch.no_grad()
    def assign(self, v_s: torch.Tensor, v_r: torch.Tensor) -> tuple[np.ndarray, np.ndarray]:
        z_s, z_r = self.encode(v_s, v_r)
        return (
            self.quantize(z_s, "s").codes.cpu().numpy(),
            self.quantize(z_r, "r").codes.cpu().numpy(),
        )


@dataclass
class TrainedQuantizer:
    model: DualRQVAE
    trace: list[dict] = field(default_factory=list)

    @property
    def config(self) -> QuantizerConfig:
        return self.model.config

    def save(self, path: str | Path) -> Path:
        arrays = {k: v.detach().cpu().numpy() for k, v in self.model.state_dict().items()}
        cfg = asdict(self.config)
        return save_archive(path, "quantizer", cfg, arrays, {"input_dim": self.model.input_dim, "trace": self.trace})

    @classmethod
    def load(cls, path: str | Path) -> "TrainedQuantizer":
        manifest, arrays = load_archive(path, "quantizer")
        cfg = dict(manifest["config"])
        cfg["hidden"] = tuple(cfg["hidden"])
        model = DualRQVAE(manifest["meta"]["input_dim"], QuantizerConfig(**cfg))
        model.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
        _freeze(model)
        return cls(model, manifest["meta"].get("trace", []))


def _freeze(model: nn.Module) -> None:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)


def _kmeans(points: np.ndarray, k: int, seed: int) -> np.ndarray:
    from sklearn.cluster import KMeans

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        km = KMeans(n_clusters=k, n_init=1, random_state=seed).fit(points)
    return km.cluster_centers_


@torch.no_grad()
def _kmeans_init(model: DualRQVAE, v_s: torch.Tensor, v_r: torch.Tensor, seed: int) -> None:
    n_codes = model.config.codebook_size
    if v_s.shape[0] < n_codes:
        return  # random N(0, 1/d_l) init stays
    latents = model.encode(v_s, v_r)
    if not all(torch.isfinite(z).all() for z in latents):
        return  # leave it to the loss check to report the bad batch
    for ch, z in zip(CHANNELS, latents):
        residual = z.clone()
        book = model.codebooks[ch]
        for level in range(model.config.levels):
            centers = torch.as_tensor(_kmeans(residual.double().numpy(), n_codes, seed + level), dtype=book.dtype)
            book[level].copy_(centers)
            idx = (residual.unsqueeze(-2) - centers).pow(2).sum(-1).argmin(-1)
            residual = residual - centers[idx]


def code_usage_perplexity(codes: np.ndarray, codebook_size: int) -> list[float]:
    """exp(entropy) of the code histogram at every level."""
    out = []
    for level in range(codes.shape[1]):
        counts = np.bincount(codes[:, level], minlength=codebook_size).astype(float)
        p = counts[counts > 0] / counts.sum()
        out.append(float(np.exp(-(p * np.log(p)).sum())))
    return out


def train_rqvae(v_s: np.ndarray, v_r: np.ndarray, config: QuantizerConfig, seed: int = 0) -> TrainedQuantizer:
    """Fit the dual quantizer with Adam; returns a frozen model and per-epoch loss trace."""
    v_s_t = torch.as_tensor(np.asarray(v_s), dtype=torch.float32)
    v_r_t = torch.as_tensor(np.asarray(v_r), dtype=torch.float32)
    if v_s_t.shape != v_r_t.shape:
        raise ValueError("search and rec preference matrices must have the same shape")
    n, input_dim = v_s_t.shape
    c = config
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    model = DualRQVAE(input_dim, c)
    opt = torch.optim.Adam(model.parameters(), lr=c.lr)

    trace: list[dict] = []
    step = 0
    for epoch in range(c.epochs):
        perm = torch.randperm(n, generator=gen)
        if epoch == 0 and c.kmeans_init:
            first = perm[: c.batch_size]
            _kmeans_init(model, v_s_t[first], v_r_t[first], seed)
        usage = {ch: torch.zeros(c.levels, c.codebook_size, dtype=torch.long) for ch in CHANNELS}
        last_residuals = {}
        sums = {"total": 0.0, "recon": 0.0, "rq": 0.0, "cl": 0.0}
        for start in range(0, n, c.batch_size):
            idx = perm[start:start + c.batch_size]
            parts = model.objective(v_s_t[idx], v_r_t[idx])
            if not torch.isfinite(parts.total):
                raise TrainingDiverged(f"non-finite quantizer loss at epoch {epoch}, batch {step}")
            opt.zero_grad()
            parts.total.backward()
            opt.step()
            with torch.no_grad():
                model.tau.clamp_(*TEMPERATURE_RANGE)
            for ch, codes, res in zip(CHANNELS, parts.codes, parts.residuals):
                for level in range(c.levels):
                    usage[ch][level] += torch.bincount(codes[:, level], minlength=c.codebook_size)
                last_residuals[ch] = res.detach()
            w = len(idx) / n
            for key in sums:
                sums[key] += w * float(getattr(parts, key).detach())
            step += 1
        trace.append({"epoch": epoch + 1, **sums})
        if c.restart_dead and epoch < c.epochs - 1:
            _restart_dead_codes(model, usage, last_residuals, gen)

    _freeze(model)
    return TrainedQuantizer(model, trace)


@torch.no_grad()
def _restart_dead_codes(model: DualRQVAE, usage: dict, residuals: dict, gen: torch.Generator) -> None:
    for ch in CHANNELS:
        book = model.codebooks[ch]
        res = residuals[ch]
        for level in range(model.config.levels):
            dead = torch.nonzero(usage[ch][level] == 0).flatten()
            if dead.numel() == 0:
                continue
            pick = torch.randint(res.shape[0], (dead.numel(),), generator=gen)
            book[level, dead] = res[pick, level]


def export_codes(quantizer: TrainedQuantizer, v_s: np.ndarray, v_r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-user code sequences (U, L) for both channels."""
    v_s = np.asarray(v_s, dtype=np.float32)
    v_r = np.asarray(v_r, dtype=np.float32)
    if v_s.shape[0] != v_r.shape[0]:
        raise ValueError("every user needs both a search and a rec preference embedding")
    return quantizer.model.assign(torch.from_numpy(v_s), torch.from_numpy(v_r))


def write_codes(path: str | Path, codes_s: np.ndarray, codes_r: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for u, (s, r) in enumerate(zip(codes_s, codes_r)):
            fh.write(json.dumps({"user": u, "s": [int(x) for x in s], "r": [int(x) for x in r]}) + "\n")
    return path


def read_codes(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    rows = {}
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                rows[int(obj["user"])] = (obj["s"], obj["r"])
    users = sorted(rows)
    if users != list(range(len(users))):
        raise ValueError(f"{path}: user ids must be dense 0..U-1")
    return (
        np.asarray([rows[u][0] for u in users], dtype=np.int64),
        np.asarray([rows[u][1] for u in users], dtype=np.int64),
    )
