"""COCO-format ground truth and detection-result files (subset of the schema)."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from ..detector.types import Detection
from ..errors import ParseError


@dataclass
class CocoDataset:
    images: dict = field(default_factory=dict)       # id -> {"width", "height", "file_name"}
    categories: dict = field(default_factory=dict)   # id -> name
    gts: dict = field(default_factory=dict)          # image id -> (cxcywh (n, 4), [names])
    preds: dict | None = None                        # image id -> [Detection]

    @property
    def class_names(self) -> list:
        return [self.categories[k] for k in sorted(self.categories)]


def _get(obj, key, path):
    if not isinstance(obj, dict):
        raise ParseError("expected an object", path)
    if key not in obj:
        raise ParseError(f"missing required key {key!r}", path)
    return obj[key]


def _number(v, path, positive=False):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ParseError(f"expected a number, got {v!r}", path)
    if not math.isfinite(v):
        raise ParseError(f"non-finite number {v!r}", path)
    if positive and v <= 0:
        raise ParseError(f"expected a positive number, got {v!r}", path)
    return float(v)


def _int(v, path):
    if isinstance(v, bool) or not isinstance(v, int):
        raise ParseError(f"expected an integer id, got {v!r}", path)
    return v


def _list(v, path):
    if not isinstance(v, list):
        raise ParseError("expected an array", path)
    return v


def _bbox(v, path, width, height):
    v = _list(v, path)
    if len(v) != 4:
        raise ParseError(f"bbox needs 4 numbers, got {len(v)}", path)
    x, y = (_number(v[i], f"{path}[{i}]") for i in range(2))
    w, h = (_number(v[i], f"{path}[{i}]", positive=True) for i in range(2, 4))
    return ((x + w / 2) / width, (y + h / 2) / height, w / width, h / height)


def parse_gt(doc) -> CocoDataset:
    ds = CocoDataset()
    for i, img in enumerate(_list(_get(doc, "images", "$"), "$.images")):
        p = f"$.images[{i}]"
        iid = _int(_get(img, "id", p), f"{p}.id")
        ds.images[iid] = {
            "width": _number(_get(img, "width", p), f"{p}.width", positive=True),
            "height": _number(_get(img, "height", p), f"{p}.height", positive=True),
            "file_name": str(_get(img, "file_name", p)),
        }
    for i, cat in enumerate(_list(_get(doc, "categories", "$"), "$.categories")):
        p = f"$.categories[{i}]"
        name = _get(cat, "name", p)
        if not isinstance(name, str):
            raise ParseError("category name must be a string", f"{p}.name")
        ds.categories[_int(_get(cat, "id", p), f"{p}.id")] = name
    boxes = {iid: [] for iid in ds.images}
    labels = {iid: [] for iid in ds.images}
    for i, ann in enumerate(_list(_get(doc, "annotations", "$"), "$.annotations")):
        p = f"$.annotations[{i}]"
        _int(_get(ann, "id", p), f"{p}.id")
        iid = _int(_get(ann, "image_id", p), f"{p}.image_id")
        cid = _int(_get(ann, "category_id", p), f"{p}.category_id")
        if iid not in ds.images:
            raise ParseError(f"unknown image_id {iid}", f"{p}.image_id")
        if cid not in ds.categories:
            raise ParseError(f"unknown category_id {cid}", f"{p}.category_id")
        im = ds.images[iid]
        boxes[iid].append(_bbox(_get(ann, "bbox", p), f"{p}.bbox", im["width"], im["height"]))
        labels[iid].append(ds.categories[cid])
    ds.gts = {iid: (np.asarray(boxes[iid], dtype=np.float64).reshape(-1, 4), labels[iid]) for iid in ds.images}
    return ds


def parse_predictions(doc, ds: CocoDataset) -> dict:
    preds = {iid: [] for iid in ds.images}
    for i, rec in enumerate(_list(doc, "$")):
        p = f"$[{i}]"
        iid = _int(_get(rec, "image_id", p), f"{p}.image_id")
        cid = _int(_get(rec, "category_id", p), f"{p}.category_id")
        if iid not in ds.images:
            raise ParseError(f"unknown image_id {iid}", f"{p}.image_id")
        if cid not in ds.categories:
            raise ParseError(f"unknown category_id {cid}", f"{p}.category_id")
        score = _number(_get(rec, "score", p), f"{p}.score")
        if not 0.0 <= score <= 1.0:
            raise ParseError(f"score {score} outside [0, 1]", f"{p}.score")
        im = ds.images[iid]
        box = _bbox(_get(rec, "bbox", p), f"{p}.bbox", im["width"], im["height"])
        preds[iid].append(Detection(box, ds.categories[cid], score))
    return preds


def _read_json(path):
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise ParseError(f"invalid JSON: {e.msg} (line {e.lineno})", "$") from None
    except OSError as e:
        raise ParseError(f"cannot read {path}: {e.strerror}", "$") from None


def load_coco_format(gt_path, pred_path=None) -> CocoDataset:
    ds = parse_gt(_read_json(gt_path))
    if pred_path is not None:
        ds.preds = parse_predictions(_read_json(pred_path), ds)
    return ds


# ---------------------------------------------------------------- emit


def _xywh(box, width, height):
    cx, cy, w, h = box
    return [(cx - w / 2) * width, (cy - h / 2) * height, w * width, h * height]


def gt_document(ds: CocoDataset) -> dict:
    cat_id = {name: cid for cid, name in ds.categories.items()}
    images, anns = [], []
    for iid in sorted(ds.images):
        im = ds.images[iid]
        images.append({"id": iid, "width": im["width"], "height": im["height"], "file_name": im["file_name"]})
        boxes, labels = ds.gts.get(iid, (np.zeros((0, 4)), []))
        for b, l in zip(boxes, labels):
            anns.append({"id": len(anns) + 1, "image_id": iid, "category_id": cat_id[l],
                         "bbox": _xywh(b, im["width"], im["height"])})
    cats = [{"id": cid, "name": ds.categories[cid]} for cid in sorted(ds.categories)]
    return {"images": images, "annotations": anns, "categories": cats}


def predictions_document(preds: dict, ds: CocoDataset) -> list:
    cat_id = {name: cid for cid, name in ds.categories.items()}
    out = []
    for iid in sorted(preds):
        im = ds.images[iid]
        for d in preds[iid]:
            out.append({"image_id": iid, "category_id": cat_id[d.label],
                        "bbox": _xywh(d.box, im["width"], im["height"]), "score": d.score})
    return out


def dataset_from_samples(samples, class_names, image_size: int) -> CocoDataset:
    """COCO view of in-memory samples (synthetic images have no file on disk)."""
    ds = CocoDataset()
    ds.categories = {i + 1: name for i, name in enumerate(class_names)}
    for s in samples:
        ds.images[s.image_id] = {"width": float(image_size), "height": float(image_size),
                                 "file_name": f"{s.image_id:06d}.png"}
        ds.gts[s.image_id] = (np.asarray(s.boxes), list(s.labels))
    return ds


def write_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, sort_keys=True, indent=1)
        f.write("\n")
