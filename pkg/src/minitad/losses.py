"""Training losses for the dense head and the refinement stage.

Classification losses share one signature: ``loss(logits, targets)`` where
``logits`` is (N, C) over model classes and ``targets`` is (N,) int64 holding
a class index for positives and -1 for background. Callers pass only rows at
valid (unmasked) locations.

Regression losses take either encoded parameters or decoded intervals, as
reported by ``REG_LOSS_SPACE``; both reduce to a scalar mean over positives
and return 0 when there are none. The paired interval terms mirror the numpy
geometry in :mod:`minitad.core` with the same epsilon guards so both agree to
float precision.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .core import EPS


# ---------------------------------------------------------------------------
# differentiable paired interval geometry
# ---------------------------------------------------------------------------

def _paired_measures(a: torch.Tensor, b: torch.Tensor):
    inter = (torch.minimum(a[..., 1], b[..., 1])
             - torch.maximum(a[..., 0], b[..., 0])).clamp(min=0.0)
    union = (a[..., 1] - a[..., 0]) + (b[..., 1] - b[..., 0]) - inter
    enclosure = (torch.maximum(a[..., 1], b[..., 1])
                 - torch.minimum(a[..., 0], b[..., 0]))
    return inter, union, enclosure


def tiou_pairs(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Elementwise tiou over the last axis; shapes broadcast."""
    inter, union, _ = _paired_measures(a, b)
    return inter / union.clamp(min=EPS)


def giou_term_pairs(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    inter, union, enclosure = _paired_measures(a, b)
    return (inter / union.clamp(min=EPS)
            - (enclosure - union) / enclosure.clamp(min=EPS))


def diou_term_pairs(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    inter, union, enclosure = _paired_measures(a, b)
    dc = 0.5 * (a[..., 0] + a[..., 1]) - 0.5 * (b[..., 0] + b[..., 1])
    return (inter / union.clamp(min=EPS)
            - (dc * dc) / (enclosure * enclosure).clamp(min=EPS * EPS))


# ---------------------------------------------------------------------------
# classification
# ---------------------------------------------------------------------------

def _one_hot(targets: torch.Tensor, num_classes: int,
             dtype: torch.dtype) -> torch.Tensor:
    """(N, C) one-hot with all-zero rows for background (-1) targets."""
    hot = torch.zeros(targets.shape[0], num_classes, dtype=dtype,
                      device=targets.device)
    pos = targets >= 0
    if pos.any():
        hot[pos, targets[pos]] = 1.0
    return hot


def focal_loss(logits: torch.Tensor, targets: torch.Tensor,
               gamma: float = 2.0, alpha: float = 0.25) -> torch.Tensor:
    """Sigmoid focal loss, summed over all cells and divided by max(1, #pos).

    With gamma=0 and alpha=0.5 every cell contributes half its binary
    cross-entropy, which the tests pin down.
    """
    hot = _one_hot(targets, logits.shape[1], logits.dtype)
    ce = F.binary_cross_entropy_with_logits(logits, hot, reduction="none")
    p = torch.sigmoid(logits)
    p_t = p * hot + (1.0 - p) * (1.0 - hot)
    alpha_t = alpha * hot + (1.0 - alpha) * (1.0 - hot)
    loss = alpha_t * (1.0 - p_t) ** gamma * ce
    num_pos = (targets >= 0).sum().clamp(min=1)
    return loss.sum() / num_pos.to(loss.dtype)


def cross_entropy_loss(logits: torch.Tensor,
                       targets: torch.Tensor) -> torch.Tensor:
    """Softmax cross-entropy with background as an implicit zero logit.

    A fixed zero column is prepended for the background class, so the head
    only ever emits C real-class logits; targets shift from -1/class to
    0/class+1. Reduces to the mean over all rows.
    """
    zeros = logits.new_zeros(logits.shape[0], 1)
    full = torch.cat([zeros, logits], dim=1)
    shifted = targets + 1
    return F.cross_entropy(full, shifted, reduction="mean")


def weighted_bce_loss(logits: torch.Tensor,
                      targets: torch.Tensor) -> torch.Tensor:
    """Per-cell binary cross-entropy with the positive term upweighted by
    the batch's negative:positive cell ratio."""
    hot = _one_hot(targets, logits.shape[1], logits.dtype)
    num_pos = hot.sum()
    num_neg = hot.numel() - num_pos
    weight = (num_neg / num_pos.clamp(min=1.0)).clamp(min=1.0)
    return F.binary_cross_entropy_with_logits(logits, hot, pos_weight=weight,
                                              reduction="mean")


def blr_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Balanced logistic regression on probabilities.

    With positive fraction 1/r the positive term is scaled by r/2 and the
    negative term by (r/2) / (r - 1), so a balanced problem at p=0.5 costs
    exactly ln 2. Falls back to plain BCE when one side is empty.
    """
    hot = _one_hot(targets, logits.shape[1], logits.dtype)
    p = torch.sigmoid(logits).clamp(min=EPS, max=1.0 - EPS)
    total = float(hot.numel())
    num_pos = hot.sum()
    if num_pos.item() == 0:
        return -torch.log(1.0 - p).mean()
    if num_pos.item() == total:
        return -torch.log(p).mean()
    ratio = total / num_pos
    coef_1 = 0.5 * ratio
    coef_0 = 0.5 * ratio / (ratio - 1.0)
    loss = coef_1 * hot * torch.log(p) + coef_0 * (1.0 - hot) * torch.log(1.0 - p)
    return -loss.sum() / total


# ---------------------------------------------------------------------------
# regression
# ---------------------------------------------------------------------------

def giou_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean (1 - giou) over paired (P, 2) decoded intervals."""
    if pred.shape[0] == 0:
        return pred.sum() * 0.0
    return (1.0 - giou_term_pairs(pred, target)).mean()


def diou_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean (1 - diou) over paired (P, 2) decoded intervals."""
    if pred.shape[0] == 0:
        return pred.sum() * 0.0
    return (1.0 - diou_term_pairs(pred, target)).mean()


def l2_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared error over encoded regression parameters."""
    if pred.shape[0] == 0:
        return pred.sum() * 0.0
    return F.mse_loss(pred, target)


def smooth_l1_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Huber-style error over encoded regression parameters."""
    if pred.shape[0] == 0:
        return pred.sum() * 0.0
    return F.smooth_l1_loss(pred, target)


CLS_LOSSES = {
    "focal": focal_loss,
    "cross_entropy": cross_entropy_loss,
    "weighted_bce": weighted_bce_loss,
    "binary_logistic_regression": blr_loss,
    "blr": blr_loss,  # short form of binary_logistic_regression
}

REG_LOSSES = {
    "giou": giou_loss,
    "diou": diou_loss,
    "l2": l2_loss,
    "smooth_l1": smooth_l1_loss,
}

# whether a regression loss consumes decoded intervals or encoded parameters
REG_LOSS_SPACE = {
    "giou": "interval",
    "diou": "interval",
    "l2": "param",
    "smooth_l1": "param",
}
