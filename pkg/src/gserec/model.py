"""Search-enhanced sequential recommender over propagated user/code embeddings."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import torch
from torch import nn

from .graph import UserCodeGraph, build_graph, propagate
from .losses import TEMPERATURE_RANGE, binary_cross_entropy, info_nce

INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 32
    heads: int = 2
    dropout: float = 0.1
    layers: int = 2
    max_rec_len: int = 20
    max_search_len: int = 20
    mlp_hidden: tuple[int, ...] = (64, 32)
    tau_user: float = 0.1
    tau_history: float = 0.1
    use_graph: bool = True
    use_mca: bool = True


class Batch(NamedTuple):
    """Padded model inputs; masks are True on real entries."""

    user: torch.Tensor          # (B,)
    rec_items: torch.Tensor     # (B, Nr)
    rec_mask: torch.Tensor      # (B, Nr)
    s_words: torch.Tensor       # (B, Ns, Wq)
    s_word_mask: torch.Tensor   # (B, Ns, Wq)
    s_clicks: torch.Tensor      # (B, Ns, Cq)
    s_click_mask: torch.Tensor  # (B, Ns, Cq)
    s_mask: torch.Tensor        # (B, Ns)

    def select(self, idx: torch.Tensor) -> "Batch":
        return Batch(*(t[idx] for t in self))


def masked_softmax(scores: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
    """Softmax over the last axis; fully masked rows give all-zero weights."""
    if mask is None:
        return torch.softmax(scores, dim=-1)
    any_valid = mask.any(dim=-1, keepdim=True)
    scores = scores.masked_fill(~mask, float("-inf"))
    scores = torch.where(any_valid, scores, torch.zeros_like(scores))
    return torch.softmax(scores, dim=-1) * mask.to(scores.dtype)


def masked_mean(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean over axis -2 of the masked rows; zero where nothing is valid."""
    m = mask.to(x.dtype).unsqueeze(-1)
    return (x * m).sum(-2) / m.sum(-2).clamp_min(1.0)


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int, dropout: float = 0.0):
        super().__init__()
        if dim % heads:
            raise ValueError("dim must be divisible by heads")
        self.dim, self.heads = dim, heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, query, key, value, key_mask=None):
        b, nq, _ = query.shape
        nk = key.shape[1]
        h, dh = self.heads, self.dim // self.heads
        q = self.q(query).view(b, nq, h, dh).transpose(1, 2)
        k = self.k(key).view(b, nk, h, dh).transpose(1, 2)
        v = self.v(value).view(b, nk, h, dh).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
        mask = None if key_mask is None else key_mask[:, None, None, :]
        if mask is not None:
            mask = mask.expand_as(scores)
        attn = self.drop(masked_softmax(scores, mask))
        ctx = (attn @ v).transpose(1, 2).reshape(b, nq, self.dim)
        return self.out(ctx)


class FeedForward(nn.Module):
    def __init__(self, dim: int, dropout: float = 0.0, mult: int = 2):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(dim, mult * dim), nn.GELU(), nn.Dropout(dropout), nn.Linear(mult * dim, dim))

    def forward(self, x):
        return self.net(x)


class EncoderBlock(nn.Module):
    """Post-norm transformer block: padding-masked self-attention then FFN."""

    def __init__(self, dim: int, heads: int, dropout: float = 0.0):
        super().__init__()
        self.attn = MultiHeadAttention(dim, heads, dropout)
        self.ffn = FeedForward(dim, dropout)
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, mask):
        x = self.norm1(x + self.drop(self.attn(x, x, x, mask)))
        return self.norm2(x + self.drop(self.ffn(x)))


class FusionBlock(nn.Module):
    """Self-attention over the history, cross-attention into the user's codes, FFN.

    Without codes (``codes=None``) the cross-attention step is skipped.
    """

    def __init__(self, dim: int, heads: int, dropout: float = 0.0):
        super().__init__()
        self.self_attn = MultiHeadAttention(dim, heads, dropout)
        self.cross_attn = MultiHeadAttention(dim, heads, dropout)
        self.ffn = FeedForward(dim, dropout)
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.norm3 = nn.LayerNorm(dim)
        self.drop = nn.Dropout(dropout)

    def forward(self, h, mask, codes=None):
        f = self.norm1(h + self.drop(self.self_attn(h, h, h, mask)))
        if codes is not None:
            f = self.norm2(f + self.drop(self.cross_attn(f, codes, codes)))
        return self.norm3(f + self.drop(self.ffn(f)))


class TargetAttention(nn.Module):
    """Pools history rows with the candidate item as the single query."""

    def __init__(self, dim: int):
        super().__init__()
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.scale = math.sqrt(dim)

    def forward(self, target, rows, mask):
        # target (B, C, d), rows (B, N, d), mask (B, N) -> (B, C, d)
        scores = self.q(target) @ self.k(rows).transpose(-1, -2) / self.scale
        weights = masked_softmax(scores, mask[:, None, :].expand_as(scores))
        return weights @ self.v(rows)


def _mlp_head(in_dim: int, hidden: tuple[int, ...]) -> nn.Sequential:
    layers: list[nn.Module] = []
    for h in hidden:
        layers += [nn.Linear(in_dim, h), nn.ReLU()]
        in_dim = h
    layers.append(nn.Linear(in_dim, 1))
    return nn.Sequential(*layers)


class Context(NamedTuple):
    user_s: torch.Tensor     # (B, d)
    user_r: torch.Tensor     # (B, d)
    w_s: torch.Tensor        # (B, Ns, d) fused search history
    w_r: torch.Tensor        # (B, Nr, d) fused rec history
    h_s: torch.Tensor        # (B, Ns, d) encoder output
    h_r: torch.Tensor
    codes_s: torch.Tensor | None  # (B, L, d)
    codes_r: torch.Tensor | None
    prop_users_s: torch.Tensor | None  # (U, d) propagated tables
    prop_users_r: torch.Tensor | None


class LossParts(NamedTuple):
    total: torch.Tensor
    bce: torch.Tensor
    user_cl: torch.Tensor
    history_cl: torch.Tensor
    reg: torch.Tensor


class GSERec(nn.Module):
    def __init__(self, n_users: int, n_items: int, n_words: int, codes_s: np.ndarray, codes_r: np.ndarray, config: ModelConfig):
        super().__init__()
        self.config = c = config
        self.n_users, self.n_items, self.n_words = n_users, n_items, n_words
        self.graph_s: UserCodeGraph = build_graph(codes_s, "s")
        self.graph_r: UserCodeGraph = build_graph(codes_r, "r")
        self.register_buffer("user_codes_s", torch.as_tensor(self.graph_s.user_codes), persistent=False)
        self.register_buffer("user_codes_r", torch.as_tensor(self.graph_r.user_codes), persistent=False)
        self.raw_codes = (np.asarray(codes_s), np.asarray(codes_r))

        d = c.dim
        self.user_emb = nn.Embedding(n_users, d)
        self.item_emb = nn.Embedding(n_items, d)
        self.word_emb = nn.Embedding(max(n_words, 1), d)
        self.code_emb_s = nn.Embedding(self.graph_s.n_codes, d)
        self.code_emb_r = nn.Embedding(self.graph_r.n_codes, d)
        self.pos_s = nn.Embedding(c.max_search_len, d)
        self.pos_r = nn.Embedding(c.max_rec_len, d)
        for emb in (self.user_emb, self.item_emb, self.word_emb, self.code_emb_s, self.code_emb_r, self.pos_s, self.pos_r):
            nn.init.normal_(emb.weight, std=INIT_STD)

        self.enc_s = EncoderBlock(d, c.heads, c.dropout)
        self.enc_r = EncoderBlock(d, c.heads, c.dropout)
        self.fuse_s = FusionBlock(d, c.heads, c.dropout)
        self.fuse_r = FusionBlock(d, c.heads, c.dropout)
        self.pool_s = TargetAttention(d)
        self.pool_r = TargetAttention(d)
        self.head = _mlp_head(5 * d, c.mlp_hidden)
        self.tau_user = nn.Parameter(torch.tensor(float(c.tau_user)))
        self.tau_history = nn.Parameter(torch.tensor(float(c.tau_history)))

    # -- embeddings ---------------------------------------------------------

    def embed_query(self, words: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        """Mean of the query's word embeddings."""
        emb = self.word_emb(words)
        if mask is None:
            return emb.mean(-2)
        return masked_mean(emb, mask)

    def search_record_embeddings(self, batch: Batch) -> torch.Tensor:
        """Query embedding plus the mean of its clicked items (zero when nothing was clicked)."""
        e_q = self.embed_query(batch.s_words, batch.s_word_mask)
        clicks = masked_mean(self.item_emb(batch.s_clicks), batch.s_click_mask)
        return e_q + clicks

    def propagated(self):
        c = self.config
        ps = propagate(self.graph_s, self.user_emb.weight, self.code_emb_s.weight, c.layers)
        pr = propagate(self.graph_r, self.user_emb.weight, self.code_emb_r.weight, c.layers)
        return ps, pr

    # -- forward ------------------------------------------------------------

    def encode(self, batch: Batch) -> Context:
        c = self.config
        n_s, n_r = batch.s_mask.shape[1], batch.rec_mask.shape[1]
        e_s = self.search_record_embeddings(batch) + self.pos_s.weight[:n_s]
        e_r = self.item_emb(batch.rec_items) + self.pos_r.weight[:n_r]
        # padded rows come out as exact zeros, so an empty history is all-zero
        h_s = self.enc_s(e_s, batch.s_mask) * batch.s_mask.unsqueeze(-1).to(e_s.dtype)
        h_r = self.enc_r(e_r, batch.rec_mask) * batch.rec_mask.unsqueeze(-1).to(e_r.dtype)

        if c.use_graph:
            ps, pr = self.propagated()
            user_s, user_r = ps.users[batch.user], pr.users[batch.user]
            codes_s = ps.codes[self.user_codes_s[batch.user]]
            codes_r = pr.codes[self.user_codes_r[batch.user]]
            prop_s, prop_r = ps.users, pr.users
        else:
            user_s = user_r = self.user_emb(batch.user)
            codes_s = codes_r = prop_s = prop_r = None
        fuse_codes = c.use_graph and c.use_mca
        w_s = self.fuse_s(h_s, batch.s_mask, codes_s if fuse_codes else None)
        w_r = self.fuse_r(h_r, batch.rec_mask, codes_r if fuse_codes else None)
        return Context(user_s, user_r, w_s, w_r, h_s, h_r, codes_s, codes_r, prop_s, prop_r)

    def score(self, ctx: Context, batch: Batch, candidates: torch.Tensor) -> torch.Tensor:
        """Click probability for each (row, candidate) pair; candidates is (B, C)."""
        return torch.sigmoid(self.logits(ctx, batch, candidates))

    def logits(self, ctx: Context, batch: Batch, candidates: torch.Tensor) -> torch.Tensor:
        e_t = self.item_emb(candidates)
        w_s = self.pool_s(e_t, ctx.w_s, batch.s_mask)
        w_r = self.pool_r(e_t, ctx.w_r, batch.rec_mask)
        n_c = candidates.shape[1]
        feats = torch.cat(
            [ctx.user_s.unsqueeze(1).expand(-1, n_c, -1), ctx.user_r.unsqueeze(1).expand(-1, n_c, -1), w_s, w_r, e_t],
            dim=-1,
        )
        return self.head(feats).squeeze(-1)

    def forward(self, batch: Batch, candidates: torch.Tensor) -> torch.Tensor:
        return self.score(self.encode(batch), batch, candidates)

    # -- losses -------------------------------------------------------------

    def user_cl(self, ctx: Context, batch: Batch) -> torch.Tensor:
        if ctx.prop_users_s is None:
            return ctx.user_s.new_zeros(())
        u = batch.user[_first_occurrence(batch.user)]
        return user_alignment_loss(ctx.prop_users_s[u], ctx.prop_users_r[u], self.tau_user)

    def history_cl(self, ctx: Context, batch: Batch) -> torch.Tensor:
        if ctx.codes_s is None:
            return ctx.user_s.new_zeros(())
        rows = _first_occurrence(batch.user)
        return history_code_alignment_loss(
            ctx.h_s[rows], batch.s_mask[rows], ctx.codes_s[rows],
            ctx.h_r[rows], batch.rec_mask[rows], ctx.codes_r[rows],
            self.tau_history,
        )

    def regularization(self) -> torch.Tensor:
        return sum(p.pow(2).sum() for p in self.parameters())

    def total_loss(self, batch: Batch, candidates: torch.Tensor, labels: torch.Tensor, lambda_user: float, lambda_history: float, lambda_reg: float) -> LossParts:
        ctx = self.encode(batch)
        prob = self.score(ctx, batch, candidates)
        bce = binary_cross_entropy(prob, labels)
        zero = bce.new_zeros(())
        ucl = self.user_cl(ctx, batch) if lambda_user > 0 else zero
        hcl = self.history_cl(ctx, batch) if lambda_history > 0 else zero
        reg = self.regularization() if lambda_reg > 0 else zero
        total = bce + lambda_user * ucl + lambda_history * hcl + lambda_reg * reg
        return LossParts(total, bce, ucl, hcl, reg)

    def clamp_temperatures(self) -> None:
        with torch.no_grad():
            self.tau_user.clamp_(*TEMPERATURE_RANGE)
            self.tau_history.clamp_(*TEMPERATURE_RANGE)


def user_alignment_loss(user_s: torch.Tensor, user_r: torch.Tensor, tau) -> torch.Tensor:
    """InfoNCE between the propagated search-side and rec-side user embeddings."""
    return info_nce(user_s, user_r, tau)


def history_code_alignment_loss(h_s, mask_s, codes_s, h_r, mask_r, codes_r, tau) -> torch.Tensor:
    """Sum over channels of InfoNCE between masked-mean history and mean code embedding.

    Users with an empty history in a channel drop out of that channel's term.
    """
    total = h_s.new_zeros(())
    for h, mask, codes in ((h_s, mask_s, codes_s), (h_r, mask_r, codes_r)):
        keep = mask.any(-1)
        if keep.any():
            total = total + info_nce(masked_mean(h[keep], mask[keep]), codes[keep].mean(-2), tau)
    return total


def _first_occurrence(users: torch.Tensor) -> torch.Tensor:
    """Indices of the first row of every distinct user, in row order."""
    seen: set[int] = set()
    keep = []
    for i, u in enumerate(users.tolist()):
        if u not in seen:
            seen.add(u)
            keep.append(i)
    return torch.as_tensor(keep, dtype=torch.long)
