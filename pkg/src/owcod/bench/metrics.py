"""Detection and continual-learning metrics: COCO-style AP, report aggregation, average rank."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..detector.boxes import cxcywh_to_xyxy, pairwise_iou
from ..errors import DataError

IOU_THRESHOLDS = tuple(np.round(np.linspace(0.5, 0.95, 10), 2))
RECALL_POINTS = np.arange(101) / 100.0


def _class_precision_recall(dets, gts, n_gt, thr):
    """dets: list of (score, image_id, xyxy) already in evaluation order."""
    matched = {img: np.zeros(len(boxes), dtype=bool) for img, boxes in gts.items()}
    tp = np.zeros(len(dets))
    for i, (_, img, box) in enumerate(dets):
        g = gts.get(img)
        if g is None or len(g) == 0:
            continue
        ious = pairwise_iou(box[None, :], g)[0]
        # highest-IoU unmatched ground truth; equal IoUs keep the lower index
        floor = min(thr, 1 - 1e-10)
        best = -1
        for j in range(len(g)):
            if matched[img][j] or ious[j] < floor:
                continue
            if best < 0 or ious[j] > ious[best]:
                best = j
        if best >= 0:
            matched[img][best] = True
            tp[i] = 1
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1 - tp)
    recall = ctp / n_gt
    precision = ctp / np.maximum(ctp + cfp, np.finfo(float).eps)
    return precision, recall


def interpolated_ap(precision, recall) -> float:
    """101-point interpolated AP from a ranked precision/recall curve."""
    if len(precision) == 0:
        return 0.0
    env = np.maximum.accumulate(np.asarray(precision)[::-1])[::-1]
    # tolerance so that a recall of exactly k/n counts as reaching the point k/n
    idx = np.searchsorted(recall, RECALL_POINTS - 1e-12, side="left")
    q = np.where(idx < len(env), env[np.minimum(idx, len(env) - 1)], 0.0)
    return float(q.mean())


def _sorted_dets(preds, label, image_ids):
    out = []
    for img in image_ids:
        for d in preds.get(img, ()):
            if d.label == label:
                out.append((d.score, img, cxcywh_to_xyxy(np.asarray(d.box))))
    order = sorted(range(len(out)), key=lambda i: -out[i][0])  # stable
    return [out[i] for i in order]


def class_ap(preds, gts, label, iou_thresholds=IOU_THRESHOLDS) -> dict[float, float] | None:
    """Per-threshold AP for one class, or None when it has no ground truth."""
    image_ids = sorted(gts)
    g = {}
    for img in image_ids:
        boxes, labels = gts[img]
        sel = [i for i, l in enumerate(labels) if l == label]
        g[img] = cxcywh_to_xyxy(np.asarray(boxes, dtype=np.float64).reshape(-1, 4)[sel]).reshape(-1, 4)
    n_gt = sum(len(b) for b in g.values())
    if n_gt == 0:
        return None
    dets = _sorted_dets(preds, label, image_ids)
    return {t: interpolated_ap(*_class_precision_recall(dets, g, n_gt, t)) for t in iou_thresholds}


@dataclass
class APResult:
    ap: float | None                      # mean over 0.50:0.95
    ap50: float | None
    per_class: dict = field(default_factory=dict)


def compute_ap(preds, gts, classes=None, iou_thresholds=IOU_THRESHOLDS) -> APResult:
    """COCO-style mAP.

    ``preds``: image_id -> list of Detection.  ``gts``: image_id -> (cxcywh boxes, labels).
    Classes without ground truth are skipped; if none has any, AP is absent (None).
    """
    if classes is None:
        classes = sorted({l for _, labels in gts.values() for l in labels})
    per_class = {}
    for c in classes:
        r = class_ap(preds, gts, c, iou_thresholds)
        if r is not None:
            per_class[c] = r
    if not per_class:
        return APResult(None, None, {})
    ap = float(np.mean([np.mean(list(r.values())) for r in per_class.values()]))
    ap50 = None
    if 0.5 in iou_thresholds:
        ap50 = float(np.mean([r[0.5] for r in per_class.values()]))
    return APResult(ap, ap50, {c: float(np.mean(list(r.values()))) for c, r in per_class.items()})


def ground_truth(samples) -> dict:
    return {s.image_id: (s.boxes, list(s.labels)) for s in samples}


# ---------------------------------------------------------------- aggregation


@dataclass
class EvalReport:
    method: str
    subset_names: list
    per_subset_ap: list              # AP of each subset after the final step
    ap_old: float | None
    ap_new: float | None
    ap_seen: float | None
    ap_unseen: float | None
    forgetting_matrix: list | None = None   # a[t][i], rows = after step t
    forgetting: list | None = None          # a[i][i] - a[t][i]
    ap50: dict = field(default_factory=dict)
    fallback_rate: dict = field(default_factory=dict)
    added_params: dict = field(default_factory=dict)
    ranks: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _mean(xs):
    xs = [x for x in xs if x is not None]
    return float(np.mean(xs)) if xs else None


def aggregate(method, subset_names, step_rows, ap_unseen, **extra) -> EvalReport:
    """Build a report from per-step AP rows.

    ``step_rows[t][i]`` is the AP of subset i measured after step t (entries
    for i > t may be None).  The last row is the final model.
    """
    T = len(subset_names)
    if len(step_rows) == 0:
        raise DataError("incomplete run: no step rows")
    final = list(step_rows[-1])
    if len(final) != T or any(a is None for a in final):
        raise DataError("incomplete run: final row lacks some subsets")
    for a in final:
        if not 0.0 <= a <= 1.0:
            raise DataError(f"AP {a} outside [0, 1]")
    matrix = None
    forgetting = None
    if len(step_rows) == T:
        matrix = [list(r) for r in step_rows]
        forgetting = [[None if (matrix[t][i] is None or i > t) else matrix[i][i] - matrix[t][i]
                       for i in range(T)] for t in range(T)]
    elif len(step_rows) != 1:
        raise DataError(f"incomplete run: {len(step_rows)} step rows for {T} subsets")
    return EvalReport(
        method=method,
        subset_names=list(subset_names),
        per_subset_ap=final,
        ap_old=_mean(final[:-1]) if T > 1 else None,
        ap_new=final[-1],
        ap_seen=_mean(final),
        ap_unseen=ap_unseen,
        forgetting_matrix=matrix,
        forgetting=forgetting,
        **extra,
    )


# ---------------------------------------------------------------- ranking


def fractional_ranks(values) -> list[float]:
    """Rank 1 = highest value; ties share the mean of their positions."""
    values = list(values)
    order = sorted(range(len(values)), key=lambda i: -values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        r = (i + j) / 2 + 1
        for k in range(i, j + 1):
            ranks[order[k]] = r
        i = j + 1
    return ranks


def combined_rank(r_seen: float, r_unseen: float) -> float:
    return math.sqrt((r_seen**2 + r_unseen**2) / 2)


def average_rank(seen_ap, unseen_ap) -> dict:
    """Average ranks of J methods.

    ``seen_ap``: method -> per-subset APs (same K subsets for every method).
    ``unseen_ap``: method -> AP on the unseen split (a scalar, or a list when
    the unseen side is itself split).  Returns method -> (R_seen, R_unseen, R_avg).
    """
    methods = list(seen_ap)
    if not methods:
        raise DataError("average_rank needs at least one method")
    if set(unseen_ap) != set(methods):
        raise DataError("seen and unseen scores cover different methods")
    k = {len(seen_ap[m]) for m in methods}
    if len(k) != 1:
        raise DataError(f"methods scored on different subset counts: {sorted(k)}")

    def mean_ranks(table):
        cols = len(next(iter(table.values())))
        acc = {m: 0.0 for m in methods}
        for i in range(cols):
            col = [table[m][i] for m in methods]
            if any(v is None for v in col):
                raise DataError(f"subset {i} is missing a score")
            for m, r in zip(methods, fractional_ranks(col)):
                acc[m] += r
        return {m: acc[m] / cols for m in methods}

    unseen_tab = {m: (list(v) if isinstance(v, (list, tuple)) else [v]) for m, v in unseen_ap.items()}
    if len({len(v) for v in unseen_tab.values()}) != 1:
        raise DataError("methods scored on different unseen splits")
    rs, ru = mean_ranks(seen_ap), mean_ranks(unseen_tab)
    return {m: (rs[m], ru[m], combined_rank(rs[m], ru[m])) for m in methods}
