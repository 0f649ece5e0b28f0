"""Segmentation losses and their learned combination.

Three terms: soft Dice, binary cross entropy and the Lovász hinge (a
convex surrogate of the Jaccard loss built from sorted hinge errors).
The combination weight of each term is a learnable log-precision scalar
s_i, combined as exp(-s_i) * L_i + s_i, so the weights settle at an
interior optimum instead of collapsing onto the smallest term.
"""

from __future__ import annotations

import torch
from torch import Tensor, nn

DICE_SMOOTH = 1.0
BCE_EPS = 1e-7

TERM_NAMES = ("dice", "lovasz", "bce")


def _check_shapes(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def dice_loss(probs: Tensor, target: Tensor) -> Tensor:
    """Soft Dice loss, 1 - (2*sum(p*y) + eps) / (sum(p) + sum(y) + eps)."""
    _check_shapes(probs, target)
    probs = probs.reshape(-1)
    target = target.reshape(-1).to(probs.dtype)
    intersection = (probs * target).sum()
    denom = probs.sum() + target.sum()
    return 1.0 - (2.0 * intersection + DICE_SMOOTH) / (denom + DICE_SMOOTH)


def bce_loss(probs: Tensor, target: Tensor) -> Tensor:
    """Mean binary cross entropy on probabilities clamped away from {0, 1}."""
    _check_shapes(probs, target)
    probs = probs.reshape(-1).clamp(BCE_EPS, 1.0 - BCE_EPS)
    target = target.reshape(-1).to(probs.dtype)
    return -(target * probs.log() + (1.0 - target) * (1.0 - probs).log()).mean()


def lovasz_grad(gt_sorted: Tensor) -> Tensor:
    """Gradient of the Jaccard-loss Lovász extension w.r.t. sorted errors."""
    gts = gt_sorted.sum()
    intersection = gts - gt_sorted.cumsum(0)
    union = gts + (1.0 - gt_sorted).cumsum(0)
    jaccard = 1.0 - intersection / union
    if len(gt_sorted) > 1:
        jaccard = jaccard.clone()
        jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def lovasz_hinge_flat(logits: Tensor, target: Tensor) -> Tensor:
    """Lovász hinge for one flattened image."""
    if logits.numel() == 0:
        raise ValueError("lovasz_hinge needs at least one pixel")
    target = target.to(logits.dtype)
    signs = 2.0 * target - 1.0
    errors = torch.clamp(1.0 - logits * signs, min=0.0)
    errors_sorted, perm = torch.sort(errors, dim=0, descending=True)
    grad = lovasz_grad(target[perm.detach()])
    return torch.dot(errors_sorted, grad.detach())


def lovasz_hinge(logits: Tensor, target: Tensor) -> Tensor:
    """Per-image Lovász hinge, averaged over the batch (dim 0)."""
    _check_shapes(logits, target)
    if logits.dim() <= 1:
        return lovasz_hinge_flat(logits.reshape(-1), target.reshape(-1))
    per_image = [
        lovasz_hinge_flat(lg.reshape(-1), tg.reshape(-1))
        for lg, tg in zip(logits, target)
    ]
    return torch.stack(per_image).mean()


class LossWeights(nn.Module):
    """Learnable log-precision scalars, one per loss term."""

    def __init__(self):
        super().__init__()
        self.s = nn.Parameter(torch.zeros(len(TERM_NAMES)))

    def forward(self, terms: Tensor) -> Tensor:
        s = self.s.to(terms.dtype)
        return (torch.exp(-s) * terms + s).sum()

    def values(self) -> tuple[float, ...]:
        return tuple(float(v) for v in self.s.detach())


def loss_terms(logits: Tensor, target: Tensor) -> Tensor:
    """The (dice, lovasz, bce) stack for one batch of logits."""
    probs = torch.sigmoid(logits)
    return torch.stack(
        [
            dice_loss(probs, target),
            lovasz_hinge(logits, target),
            bce_loss(probs, target),
        ]
    )


def combined_loss(logits: Tensor, target: Tensor, weights: LossWeights) -> Tensor:
    """Total training loss with learned per-term weighting."""
    terms = loss_terms(logits, target)
    if not torch.isfinite(terms).all():
        raise FloatingPointError(
            f"non-finite loss terms: {dict(zip(TERM_NAMES, terms.tolist()))}"
        )
    return weights(terms)
