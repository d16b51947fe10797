from __future__ import annotations

import torch
import torch.nn.functional as F

TEMPERATURE_RANGE = (0.01, 1.0)
BCE_EPS = 1e-7


def info_nce(a: torch.Tensor, b: torch.Tensor, tau: torch.Tensor | float, eps: float = 1e-8) -> torch.Tensor:
    """Symmetric in-batch InfoNCE on cosine similarity.

    Row i of ``a`` and row i of ``b`` are the positive pair; every other row
    of the opposite side is a negative. The softmax denominator includes the
    positive, so the loss is non-negative and exactly 0 for a batch of one.
    Returns the mean over the batch of the sum of both directions.
    """
    if a.shape != b.shape or a.dim() != 2:
        raise ValueError(f"expected two equal (B, d) batches, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[0] == 0:
        return a.new_zeros(())
    tau = torch.as_tensor(tau, dtype=a.dtype).clamp(*TEMPERATURE_RANGE)
    a = a / a.norm(dim=-1, keepdim=True).clamp_min(eps)
    b = b / b.norm(dim=-1, keepdim=True).clamp_min(eps)
    logits = a @ b.T / tau
    target = torch.arange(a.shape[0])
    return F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target)


def binary_cross_entropy(prob: torch.Tensor, label: torch.Tensor, eps: float = BCE_EPS) -> torch.Tensor:
    p = prob.clamp(eps, 1.0 - eps)
    label = label.to(p.dtype)
    return -(label * torch.log(p) + (1.0 - label) * torch.log1p(-p)).mean()
