"""Minimum-cost bipartite assignment (Hungarian / Kuhn-Munkres, O(n^2 m))."""

from __future__ import annotations

import numpy as np

from ..errors import DataError
from .boxes import cxcywh_to_xyxy, pairwise_giou


def linear_assignment(cost) -> list[tuple[int, int]]:
    """Optimal (row, col) pairs for an n x m cost matrix with n <= m.

    Potentials-based shortest augmenting path.  Every comparison is strict and
    scans columns in index order, so among equal-cost alternatives the lowest
    indices win; the result is fully deterministic.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    if n == 0:
        return []
    if n > m:
        raise DataError(f"cannot assign {n} rows to {m} columns")
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    match = np.zeros(m + 1, dtype=int)  # column -> row (1-based, 0 = free)
    way = np.zeros(m + 1, dtype=int)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(m + 1, inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            delta, j1 = inf, 0
            for j in range(1, m + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta, j1 = minv[j], j
            for j in range(m + 1):
                if used[j]:
                    u[match[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    pairs = [(int(match[j]) - 1, j - 1) for j in range(1, m + 1) if match[j]]
    return sorted(pairs)


def matching_cost(pred_boxes, pred_probs, gt_boxes, gt_class_idx, w_cls=2.0, w_l1=5.0, w_giou=2.0):
    """(n_pred, n_gt) cost: w_cls(1 - p_gt) + w_l1 |b - g|_1 + w_giou (1 - GIoU)."""
    pred_boxes = np.asarray(pred_boxes, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    p = np.asarray(pred_probs, dtype=np.float64)[:, list(gt_class_idx)]
    l1 = np.abs(pred_boxes[:, None, :] - gt_boxes[None, :, :]).sum(-1)
    giou = pairwise_giou(cxcywh_to_xyxy(pred_boxes), cxcywh_to_xyxy(gt_boxes))
    return w_cls * (1.0 - p) + w_l1 * l1 + w_giou * (1.0 - giou)


def hungarian_match(pred_boxes, pred_probs, gt_boxes, gt_class_idx, weights=(2.0, 5.0, 2.0)):
    """Assignment as sorted (pred index, gt index) pairs covering every gt."""
    n_pred, n_gt = len(pred_boxes), len(gt_boxes)
    if n_gt > n_pred:
        raise DataError(f"{n_gt} ground-truth boxes exceed {n_pred} queries")
    if n_gt == 0:
        return []
    cost = matching_cost(pred_boxes, pred_probs, gt_boxes, gt_class_idx, *weights)
    pairs = linear_assignment(cost.T)  # rows = gts
    return sorted((p, g) for g, p in pairs)
