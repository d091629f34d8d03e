"""Box conversions, IoU/GIoU in numpy, and a differentiable GIoU."""

import numpy as np

from .. import tensor as T


def cxcywh_to_xyxy(b):
    b = np.asarray(b, dtype=np.float64)
    cx, cy, w, h = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def xyxy_to_cxcywh(b):
    b = np.asarray(b, dtype=np.float64)
    x0, y0, x1, y1 = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], axis=-1)


def box_area(xyxy):
    xyxy = np.asarray(xyxy, dtype=np.float64)
    return np.clip(xyxy[..., 2] - xyxy[..., 0], 0, None) * np.clip(xyxy[..., 3] - xyxy[..., 1], 0, None)


def pairwise_iou(a, b):
    """IoU matrix between xyxy boxes ``a`` (n,4) and ``b`` (m,4)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def pairwise_giou(a, b):
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    iou = inter / union
    elt = np.minimum(a[:, None, :2], b[None, :, :2])
    erb = np.maximum(a[:, None, 2:], b[None, :, 2:])
    ewh = np.clip(erb - elt, 0, None)
    enclose = ewh[..., 0] * ewh[..., 1]
    return iou - (enclose - union) / enclose


def giou_tensor(pred, target):
    """Row-wise GIoU between (n,4) cxcywh tensors; returns shape (n,)."""
    pred, target = T.as_tensor(pred), T.as_tensor(target)

    def corners(b):
        c, s = b[:, 0:2], T.scale(b[:, 2:4], 0.5)
        return T.sub(c, s), T.add(c, s)

    p0, p1 = corners(pred)
    t0, t1 = corners(target)
    inter_wh = T.relu(T.sub(T.minimum(p1, t1), T.maximum(p0, t0)))
    inter = T.mul(inter_wh[:, 0], inter_wh[:, 1])
    area_p = T.mul(pred[:, 2], pred[:, 3])
    area_t = T.mul(target[:, 2], target[:, 3])
    union = T.sub(T.add(area_p, area_t), inter)
    enc_wh = T.sub(T.maximum(p1, t1), T.minimum(p0, t0))
    enclose = T.mul(enc_wh[:, 0], enc_wh[:, 1])
    iou = T.div(inter, union)
    return T.sub(iou, T.div(T.sub(enclose, union), enclose))
