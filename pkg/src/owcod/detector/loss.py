"""Set-prediction loss: sigmoid focal + L1 + (1 - GIoU) over Hungarian-matched pairs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import tensor as T
from ..tensor import Tensor
from .boxes import giou_tensor
from .matching import hungarian_match


@dataclass(frozen=True)
class LossWeights:
    cls: float = 2.0
    l1: float = 5.0
    giou: float = 2.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0


def focal_loss(probs, pos_index, alpha=0.25, gamma=2.0) -> Tensor:
    """Summed sigmoid focal loss on an (n, k) probability tensor.

    ``pos_index`` is a (rows, cols) pair of index arrays marking positive
    targets; every other entry is a negative.  Positives contribute
    ``-alpha (1-p)^gamma log p``, negatives ``-(1-alpha) p^gamma log(1-p)``.
    """
    probs = T.as_tensor(probs)
    rows, cols = (np.asarray(i, dtype=int) for i in pos_index)
    neg_mask = np.ones(probs.shape)
    neg_mask[rows, cols] = 0.0
    p_neg = T.mul(probs, Tensor(neg_mask))
    neg = T.mul(_power(p_neg, gamma), T.log(T.sub(1.0, p_neg)))
    total = T.scale(T.sum_(neg), -(1.0 - alpha))
    if len(rows):
        p_pos = probs[rows, cols]
        pos = T.mul(_power(T.sub(1.0, p_pos), gamma), T.log(p_pos))
        total = T.add(total, T.scale(T.sum_(pos), -alpha))
    return total


def _power(x, gamma):
    if gamma == 2.0:
        return T.mul(x, x)
    if gamma == 0.0:
        return Tensor(np.ones(x.shape))
    g = int(gamma)
    if g != gamma or g < 1:
        raise ValueError("focal gamma must be a non-negative integer")
    out = x
    for _ in range(g - 1):
        out = T.mul(out, x)
    return out


def l1_loss(pred, target) -> Tensor:
    return T.sum_(T.abs_(T.sub(pred, target)))


def giou_loss(pred, target) -> Tensor:
    g = giou_tensor(pred, target)
    return T.sub(float(g.shape[0]), T.sum_(g))


def detection_loss(boxes, logits, gt_boxes, gt_class_idx, assignment=None,
                   weights: LossWeights = LossWeights()) -> Tensor:
    """Total loss for one image; normalised by max(1, number of ground truths)."""
    boxes, logits = T.as_tensor(boxes), T.as_tensor(logits)
    probs = T.sigmoid(logits)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_class_idx = np.asarray(gt_class_idx, dtype=int)
    if assignment is None:
        assignment = hungarian_match(boxes.data, probs.data, gt_boxes, gt_class_idx,
                                     (weights.cls, weights.l1, weights.giou))
    pred_idx = np.array([p for p, _ in assignment], dtype=int)
    gt_idx = np.array([g for _, g in assignment], dtype=int)
    norm = 1.0 / max(1, len(gt_boxes))
    cls = focal_loss(probs, (pred_idx, gt_class_idx[gt_idx] if len(gt_idx) else gt_idx),
                     weights.focal_alpha, weights.focal_gamma)
    total = T.scale(cls, weights.cls * norm)
    if len(pred_idx):
        matched = boxes[pred_idx]
        target = Tensor(gt_boxes[gt_idx])
        total = T.add(total, T.scale(l1_loss(matched, target), weights.l1 * norm))
        total = T.add(total, T.scale(giou_loss(matched, target), weights.giou * norm))
    return total
