"""Masked reconstruction loss, video-text InfoNCE and the combined objective."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

DEFAULT_TAU = 0.07


@dataclass
class LossReport:
    total: torch.Tensor  # differentiable objective
    l_mse: float
    l_nce: float  # NCE term that entered the objective (0 when disabled)
    nce_diagnostic: float  # NCE value, recorded whether or not it is optimized

    def as_row(self) -> dict:
        return {"l_mse": self.l_mse, "l_nce": self.l_nce, "nce_diagnostic": self.nce_diagnostic}


def masked_mse(pred: torch.Tensor, target: torch.Tensor, masked: torch.Tensor | None) -> torch.Tensor:
    """Mean squared error over masked rows only.

    ``pred`` and ``target`` are ``[..., L, P]``; ``masked`` is a boolean
    ``[..., L]`` selector. ``masked=None`` averages over every row.
    """
    if pred.shape != target.shape:
        raise ValueError(f"prediction {tuple(pred.shape)} and target {tuple(target.shape)} differ")
    if masked is None:
        return ((pred - target) ** 2).mean()
    if masked.shape != pred.shape[:-1]:
        raise ValueError(f"mask {tuple(masked.shape)} does not match rows {tuple(pred.shape[:-1])}")
    if not masked.any():
        raise ValueError("no masked rows to compute the loss over")
    # select rather than multiply so visible rows get exactly zero gradient
    err = (pred[masked] - target[masked]) ** 2
    return err.mean()


def info_nce(q: torch.Tensor, k_pos: torch.Tensor, negatives: torch.Tensor | None,
             tau: float = DEFAULT_TAU) -> torch.Tensor:
    """-log softmax weight of the positive key among {k+} and the negatives."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    pos = (q * k_pos).sum(-1, keepdim=True)
    if negatives is None or len(negatives) == 0:
        logits = pos / tau
    else:
        logits = torch.cat([pos, negatives @ q], dim=-1) / tau
    return torch.logsumexp(logits, dim=-1) - logits[..., 0]


def symmetric_nce(v: torch.Tensor, t: torch.Tensor, tau: float = DEFAULT_TAU) -> torch.Tensor:
    """Mean over the batch of the video->text and text->video InfoNCE average.

    Negatives for each direction are the other rows of the opposite modality.
    """
    if v.shape[0] < 2:
        raise ValueError("contrastive loss needs a batch of at least 2")
    if v.shape != t.shape:
        raise ValueError(f"video {tuple(v.shape)} and text {tuple(t.shape)} embeddings differ")
    if tau <= 0:
        raise ValueError("temperature must be positive")
    logits = v @ t.T / tau
    target = torch.arange(v.shape[0], device=v.device)
    return 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target))


def combine(l_mse: torch.Tensor, l_nce: torch.Tensor, lam: float = 1.0,
            contrastive_enabled: bool = True) -> LossReport:
    diag = float(l_nce.detach())
    if contrastive_enabled:
        total = l_mse + lam * l_nce
        used = diag
    else:
        total = l_mse
        used = 0.0
    return LossReport(total, float(l_mse.detach()), used, diag)
