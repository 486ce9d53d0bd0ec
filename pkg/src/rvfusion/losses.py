"""Detection loss: BCE classification, smooth L1 regression, direction BCE.

Ignore-labelled anchors contribute nothing to any term. The regression and
direction terms are normalized by the positive count (guarded at 1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, bce_with_logits, smooth_l1
from .net import NetworkOutput
from .targets import LABEL_IGNORE, LABEL_POSITIVE, TargetAssignment


@dataclass(frozen=True)
class LossWeights:
    w_cls: float = 1.0
    w_reg: float = 2.0
    w_dir: float = 0.2

    def __post_init__(self):
        if min(self.w_cls, self.w_reg, self.w_dir) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.w_cls == self.w_reg == self.w_dir == 0:
            raise ValueError("at least one loss weight must be positive")


def total_loss(out: NetworkOutput, tgt: TargetAssignment,
               weights: LossWeights = LossWeights(), yaw_mode: str = "sine"):
    """Weighted sum of the three head losses.

    Returns (loss Tensor, breakdown dict of floats). With yaw_mode
    "simple" the direction term is dropped entirely (the 7th regression
    target is then the raw wrapped angle difference).
    """
    labels = tgt.labels.reshape(-1)
    keep = np.nonzero(labels != LABEL_IGNORE)[0]
    pos = np.nonzero(labels == LABEL_POSITIVE)[0]
    n_pos = max(len(pos), 1)

    cls_flat = out.cls.reshape(-1)
    if len(keep):
        cls_loss = bce_with_logits(
            cls_flat.take_rows(keep),
            (labels[keep] == LABEL_POSITIVE).astype(float)).mean()
    else:
        cls_loss = Tensor(0.0)

    if len(pos):
        reg_flat = out.reg.reshape(-1, 7)
        reg_loss = smooth_l1(
            reg_flat.take_rows(pos),
            tgt.reg_targets.reshape(-1, 7)[pos]).sum() / n_pos
    else:
        reg_loss = Tensor(0.0)

    if yaw_mode != "simple" and len(pos):
        dir_flat = out.dir.reshape(-1)
        dir_loss = bce_with_logits(
            dir_flat.take_rows(pos),
            tgt.dir_targets.reshape(-1)[pos]).sum() / n_pos
    else:
        dir_loss = Tensor(0.0)

    loss = (weights.w_cls * cls_loss + weights.w_reg * reg_loss
            + weights.w_dir * dir_loss)
    breakdown = {
        "cls": float(cls_loss.data),
        "reg": float(reg_loss.data),
        "dir": float(dir_loss.data),
        "total": float(loss.data),
    }
    return loss, breakdown
