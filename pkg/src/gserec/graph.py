"""User-code bipartite graphs and parameter-free degree-normalized propagation."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch


@dataclass(frozen=True)
class UserCodeGraph:
    """Users link to the level-qualified codes they own.

    ``code_keys[j]`` is the (level, index) identity of code node j; only codes
    assigned to at least one user become nodes. ``user_codes[u]`` lists the
    dense code node of every level for user u.
    """

    channel: str
    n_users: int
    code_keys: tuple[tuple[int, int], ...]
    user_codes: np.ndarray      # (U, L) dense code node ids
    edge_user: np.ndarray       # (E,)
    edge_code: np.ndarray       # (E,)
    edge_weight: np.ndarray     # (E,) 1/sqrt(deg_u * deg_c)

    @property
    def n_codes(self) -> int:
        return len(self.code_keys)

    @property
    def n_nodes(self) -> int:
        return self.n_users + self.n_codes

    @property
    def n_edges(self) -> int:
        return len(self.edge_user)

    def user_degrees(self) -> np.ndarray:
        return np.bincount(self.edge_user, minlength=self.n_users)

    def code_degrees(self) -> np.ndarray:
        return np.bincount(self.edge_code, minlength=self.n_codes)

    def affiliation(self) -> np.ndarray:
        a = np.zeros((self.n_users, self.n_codes), dtype=np.int8)
        a[self.edge_user, self.edge_code] = 1
        return a

    def stats(self) -> dict:
        deg = self.code_degrees()
        return {
            "channel": self.channel,
            "users": self.n_users,
            "codes": self.n_codes,
            "nodes": self.n_nodes,
            "edges": self.n_edges,
            "code_degree_min": int(deg.min()) if deg.size else 0,
            "code_degree_max": int(deg.max()) if deg.size else 0,
            "code_degree_mean": float(deg.mean()) if deg.size else 0.0,
        }

    def dump(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as fh:
            for u, c in zip(self.edge_user, self.edge_code):
                level, index = self.code_keys[c]
                fh.write(f"u{u} c{level}_{index}\n")
        return path


def build_graph(codes: np.ndarray, channel: str) -> UserCodeGraph:
    """Graph over users and the (level, index) codes in a (U, L) assignment array."""
    codes = np.asarray(codes, dtype=np.int64)
    if codes.ndim != 2:
        raise ValueError("codes must be a (users, levels) array")
    n_users, levels = codes.shape
    keys = sorted({(level, int(codes[u, level])) for u in range(n_users) for level in range(levels)})
    node = {k: j for j, k in enumerate(keys)}
    user_codes = np.array(
        [[node[(level, int(codes[u, level]))] for level in range(levels)] for u in range(n_users)],
        dtype=np.int64,
    ).reshape(n_users, levels)
    edge_user = np.repeat(np.arange(n_users), levels)
    edge_code = user_codes.reshape(-1)
    pairs = set(zip(edge_user.tolist(), edge_code.tolist()))
    if len(pairs) != len(edge_user):
        raise ValueError("duplicate (user, code) edge")
    deg_u = np.bincount(edge_user, minlength=n_users).astype(np.float64)
    deg_c = np.bincount(edge_code, minlength=len(keys)).astype(np.float64)
    weight = 1.0 / np.sqrt(deg_u[edge_user] * deg_c[edge_code])
    return UserCodeGraph(channel, n_users, tuple(keys), user_codes, edge_user, edge_code, weight)


class PropagatedEmbeddings(NamedTuple):
    users: torch.Tensor
    codes: torch.Tensor


def propagate(graph: UserCodeGraph, user_table: torch.Tensor, code_table: torch.Tensor, layers: int) -> PropagatedEmbeddings:
    """Mean of layer-0..K embeddings under symmetric-normalized bipartite message passing.

    Sparse edge-list kernel; ``index_add_`` on CPU reduces in edge order, so
    the output is bitwise reproducible.
    """
    if layers < 0:
        raise ValueError("layers must be >= 0")
    if user_table.shape[0] != graph.n_users or code_table.shape[0] != graph.n_codes:
        raise ValueError("embedding tables do not match graph node counts")
    eu = torch.as_tensor(graph.edge_user)
    ec = torch.as_tensor(graph.edge_code)
    w = torch.as_tensor(graph.edge_weight, dtype=user_table.dtype).unsqueeze(-1)
    u, c = user_table, code_table
    sum_u, sum_c = u, c
    for _ in range(layers):
        new_u = torch.zeros_like(u).index_add_(0, eu, c[ec] * w)
        new_c = torch.zeros_like(c).index_add_(0, ec, u[eu] * w)
        u, c = new_u, new_c
        sum_u = sum_u + u
        sum_c = sum_c + c
    return PropagatedEmbeddings(sum_u / (layers + 1), sum_c / (layers + 1))
