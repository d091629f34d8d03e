import json
import math

import numpy as np
import pytest

from owcod.bench.coco import (
    dataset_from_samples,
    gt_document,
    load_coco_format,
    parse_gt,
    parse_predictions,
    predictions_document,
)
from owcod.bench.metrics import compute_ap
from owcod.errors import ParseError


def minimal():
    return {
        "images": [{"id": 7, "width": 100, "height": 100, "file_name": "a.png", "extra": 1}],
        "annotations": [{"id": 1, "image_id": 7, "category_id": 3, "bbox": [10, 10, 20, 20]}],
        "categories": [{"id": 3, "name": "red circle"}],
        "info": {"ignored": True},
    }


def test_minimal_file_gives_one_sample(tmp_path):
    p = tmp_path / "gt.json"
    p.write_text(json.dumps(minimal()))
    ds = load_coco_format(p)
    assert list(ds.gts) == [7]
    boxes, labels = ds.gts[7]
    assert labels == ["red circle"]
    assert np.allclose(boxes, [[0.2, 0.2, 0.2, 0.2]])


def test_non_square_image_normalisation():
    doc = minimal()
    doc["images"][0].update(width=200, height=50)
    doc["annotations"][0]["bbox"] = [20, 5, 40, 10]
    assert np.allclose(parse_gt(doc).gts[7][0], [[0.2, 0.2, 0.2, 0.2]])


@pytest.mark.parametrize("mutate, path", [
    (lambda d: d["annotations"][0].update(image_id=99), r"\$\.annotations\[0\]\.image_id: unknown image_id 99"),
    (lambda d: d["annotations"][0].update(category_id=5), r"\$\.annotations\[0\]\.category_id"),
    (lambda d: d["annotations"][0].pop("bbox"), r"\$\.annotations\[0\]: missing required key 'bbox'"),
    (lambda d: d["annotations"][0].update(bbox=[1, 2, math.nan, 3]), r"\$\.annotations\[0\]\.bbox\[2\]: non-finite"),
    (lambda d: d["annotations"][0].update(bbox=[1, 2, 0, 3]), r"\$\.annotations\[0\]\.bbox\[2\]"),
    (lambda d: d["annotations"][0].update(bbox=[1, 2, 3]), r"\$\.annotations\[0\]\.bbox"),
    (lambda d: d["images"][0].pop("width"), r"\$\.images\[0\]: missing required key 'width'"),
    (lambda d: d["images"][0].update(height=math.inf), r"\$\.images\[0\]\.height"),
    (lambda d: d.pop("categories"), r"\$: missing required key 'categories'"),
    (lambda d: d["categories"][0].update(id="3"), r"\$\.categories\[0\]\.id"),
])
def test_parse_errors_name_the_json_path(mutate, path):
    doc = minimal()
    mutate(doc)
    with pytest.raises(ParseError, match=path):
        parse_gt(doc)


def test_invalid_json_file(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(ParseError, match="invalid JSON"):
        load_coco_format(p)


def test_predictions_parse_and_score(tmp_path):
    gt, pr = tmp_path / "gt.json", tmp_path / "pr.json"
    gt.write_text(json.dumps(minimal()))
    pr.write_text(json.dumps([{"image_id": 7, "category_id": 3, "bbox": [10, 10, 20, 20], "score": 0.8}]))
    ds = load_coco_format(gt, pr)
    assert compute_ap(ds.preds, ds.gts).ap == 1.0


def test_prediction_errors():
    ds = parse_gt(minimal())
    with pytest.raises(ParseError, match=r"\$\[0\]\.score"):
        parse_predictions([{"image_id": 7, "category_id": 3, "bbox": [1, 1, 2, 2], "score": 1.5}], ds)
    with pytest.raises(ParseError, match=r"\$\[1\]\.image_id"):
        parse_predictions([{"image_id": 7, "category_id": 3, "bbox": [1, 1, 2, 2], "score": 0.5},
                           {"image_id": 8, "category_id": 3, "bbox": [1, 1, 2, 2], "score": 0.5}], ds)
    with pytest.raises(ParseError, match=r"\$: expected an array"):
        parse_predictions({}, ds)


def test_round_trip_preserves_ground_truth():
    doc = minimal()
    doc["annotations"].append({"id": 2, "image_id": 7, "category_id": 3, "bbox": [50, 40, 30, 10]})
    ds = parse_gt(doc)
    again = parse_gt(json.loads(json.dumps(gt_document(ds))))
    assert again.categories == ds.categories
    for iid in ds.gts:
        assert again.gts[iid][1] == ds.gts[iid][1]
        assert np.allclose(again.gts[iid][0], ds.gts[iid][0], atol=1e-12)


def test_predictions_document_round_trip():
    from owcod.detector.types import ImageSample, Detection
    s = ImageSample(np.zeros((4, 4, 3)), [(0.5, 0.5, 0.5, 0.5)], ["a"], 3)
    ds = dataset_from_samples([s], ["a", "b"], 64)
    preds = {3: [Detection((0.4, 0.5, 0.2, 0.3), "b", 0.25)]}
    back = parse_predictions(json.loads(json.dumps(predictions_document(preds, ds))), ds)
    d = back[3][0]
    assert d.label == "b" and d.score == 0.25 and np.allclose(d.box, (0.4, 0.5, 0.2, 0.3))
