import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from owcod.bench.metrics import (
    IOU_THRESHOLDS,
    aggregate,
    average_rank,
    class_ap,
    combined_rank,
    compute_ap,
    fractional_ranks,
)
from owcod.detector.types import Detection
from owcod.errors import DataError
from ref_ap import reference_class_ap

GT_BOX = (0.5, 0.5, 0.4, 0.4)


def test_single_exact_prediction_scores_one():
    gts = {1: (np.array([GT_BOX]), ["a"])}
    preds = {1: [Detection(GT_BOX, "a", 0.9)]}
    r = compute_ap(preds, gts)
    assert r.ap == 1.0 and r.ap50 == 1.0


def test_no_predictions_scores_zero():
    gts = {1: (np.array([GT_BOX]), ["a"])}
    assert compute_ap({}, gts).ap == 0.0


def test_two_gts_one_exact_prediction_gives_51_of_101():
    gts = {1: (np.array([GT_BOX, (0.2, 0.2, 0.1, 0.1)]), ["a", "a"])}
    preds = {1: [Detection(GT_BOX, "a", 0.9)]}
    per_iou = class_ap(preds, gts, "a")
    for v in per_iou.values():
        assert v == pytest.approx(51 / 101, abs=1e-12)
    assert reference_class_ap(preds, gts, "a", 0.5) == pytest.approx(51 / 101, abs=1e-12)


def test_empty_ground_truth_is_absent_not_zero():
    r = compute_ap({1: [Detection(GT_BOX, "a", 0.5)]}, {1: (np.zeros((0, 4)), [])}, classes=["a"])
    assert r.ap is None and r.ap50 is None


def test_classes_without_gt_are_skipped():
    gts = {1: (np.array([GT_BOX]), ["a"])}
    preds = {1: [Detection(GT_BOX, "a", 0.9), Detection(GT_BOX, "b", 0.9)]}
    assert compute_ap(preds, gts, classes=["a", "b"]).ap == 1.0


def test_duplicate_detection_is_false_positive():
    gts = {1: (np.array([GT_BOX]), ["a"])}
    preds = {1: [Detection(GT_BOX, "a", 0.9), Detection(GT_BOX, "a", 0.8)]}
    # recall 1 is reached at rank 1 with precision 1
    assert compute_ap(preds, gts).ap == 1.0
    preds = {1: [Detection(GT_BOX, "a", 0.8), Detection((0.1, 0.1, 0.1, 0.1), "a", 0.9)]}
    assert compute_ap(preds, gts).ap == pytest.approx(0.5)


# ---------------------------------------------------------------- reference equivalence

GRID = [0.15, 0.3, 0.45, 0.6, 0.75]


def _random_instance(rng, n_images, max_boxes, labels=("a", "b")):
    gts, preds = {}, {}
    for img in range(1, n_images + 1):
        n = int(rng.integers(0, max_boxes + 1))
        boxes, names = [], []
        for _ in range(n):
            # coarse grid so IoU ties and exact overlaps happen often
            cx, cy = rng.choice(GRID, 2)
            w, h = rng.choice([0.1, 0.2, 0.3], 2)
            boxes.append((cx, cy, w, h))
            names.append(str(rng.choice(labels)))
        gts[img] = (np.array(boxes).reshape(-1, 4), names)
        dets = []
        for _ in range(int(rng.integers(0, max_boxes + 1))):
            if boxes and rng.random() < 0.6:
                b = np.array(boxes[int(rng.integers(len(boxes)))])
                b = b + rng.choice([0.0, 0.0, 0.01, -0.02, 0.05], 4) * np.array([1, 1, 0.5, 0.5])
                b[2:] = np.maximum(b[2:], 0.05)
            else:
                b = np.array([*rng.choice(GRID, 2), *rng.choice([0.1, 0.2], 2)])
            score = float(rng.choice([0.2, 0.5, 0.5, 0.8, 0.9]))  # ties on purpose
            dets.append(Detection(tuple(float(v) for v in b), str(rng.choice(labels)), score))
        preds[img] = dets
    return preds, gts


def test_matches_reference_on_exhaustive_small_suite():
    rng = np.random.default_rng(1234)
    checked = 0
    for n_images in range(1, 6):
        for max_boxes in range(1, 5):
            for _ in range(25):
                preds, gts = _random_instance(rng, n_images, max_boxes)
                for label in ("a", "b"):
                    got = class_ap(preds, gts, label)
                    for t in IOU_THRESHOLDS:
                        ref = reference_class_ap(preds, gts, label, t)
                        if got is None:
                            assert ref is None
                        else:
                            assert abs(got[t] - ref) <= 1e-9
                            checked += 1
    assert checked > 1000


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 5), st.integers(1, 4))
def test_matches_reference_property(seed, n_images, max_boxes):
    preds, gts = _random_instance(np.random.default_rng(seed), n_images, max_boxes)
    got = class_ap(preds, gts, "a")
    for t in (0.5, 0.75, 0.95):
        ref = reference_class_ap(preds, gts, "a", t)
        assert (got is None and ref is None) or abs(got[t] - ref) <= 1e-9


# ---------------------------------------------------------------- ranks


def test_hand_rank_case():
    assert combined_rank(2.0, 1.0) == pytest.approx(math.sqrt(5 / 2), abs=1e-12)
    assert math.sqrt(5 / 2) == pytest.approx(1.5811, abs=1e-4)


def test_single_method_ranks_one():
    assert average_rank({"m": [0.3, 0.5]}, {"m": 0.1}) == {"m": (1.0, 1.0, 1.0)}


def test_best_everywhere_vs_second_everywhere():
    r = average_rank({"x": [0.9, 0.8], "y": [0.1, 0.2]}, {"x": 0.5, "y": 0.4})
    assert r["x"][2] == 1.0 and r["y"][2] == 2.0


def test_fractional_ranks_share_ties():
    assert fractional_ranks([0.5, 0.7, 0.5, 0.1]) == [2.5, 1.0, 2.5, 4.0]


def test_rank_metric_matches_formula_on_mixed_table():
    seen = {"x": [0.9, 0.1], "y": [0.5, 0.5], "z": [0.5, 0.9]}
    unseen = {"x": 0.2, "y": 0.3, "z": 0.2}
    r = average_rank(seen, unseen)
    # subset 1: x=1, y=z=2.5; subset 2: z=1, y=2, x=3; unseen: y=1, x=z=2.5
    assert r["x"][:2] == (2.0, 2.5)
    assert r["y"][:2] == (2.25, 1.0)
    assert r["z"][:2] == (1.75, 2.5)
    for rs, ru, ra in r.values():
        assert abs(ra - math.sqrt((rs**2 + ru**2) / 2)) <= 1e-12


def test_inconsistent_subset_coverage_rejected():
    with pytest.raises(DataError):
        average_rank({"x": [0.1, 0.2], "y": [0.3]}, {"x": 0.1, "y": 0.2})
    with pytest.raises(DataError):
        average_rank({"x": [0.1]}, {"y": 0.1})


ap_lists = st.lists(st.floats(0, 1, allow_nan=False), min_size=3, max_size=3)


@settings(max_examples=100, deadline=None)
@given(st.lists(ap_lists, min_size=1, max_size=5), st.lists(st.floats(0, 1), min_size=5, max_size=5))
def test_quadratic_mean_bound(table, unseen):
    seen = {f"m{i}": row for i, row in enumerate(table)}
    un = {f"m{i}": unseen[i] for i in range(len(table))}
    for rs, ru, ra in average_rank(seen, un).values():
        assert min(rs, ru) - 1e-12 <= (rs + ru) / 2 <= ra + 1e-12
        assert ra <= max(rs, ru) + 1e-12


@settings(max_examples=100, deadline=None)
@given(st.lists(ap_lists, min_size=2, max_size=5), st.integers(0, 2), st.floats(0, 1))
def test_raising_an_ap_never_worsens_rank(table, col, bump):
    seen = {f"m{i}": list(row) for i, row in enumerate(table)}
    un = {m: 0.0 for m in seen}
    before = average_rank(seen, un)["m0"][0]
    seen["m0"][col] = max(seen["m0"][col], bump)
    assert average_rank(seen, un)["m0"][0] <= before


# ---------------------------------------------------------------- aggregation


def test_single_step_run():
    r = aggregate("m", ["s1"], [[0.4]], 0.2)
    assert r.ap_old is None and r.ap_new == r.ap_seen == 0.4


def test_forgetting_matrix():
    rows = [[0.5, None, None], [0.4, 0.6, None], [0.3, 0.6, 0.7]]
    r = aggregate("m", ["a", "b", "c"], rows, 0.1)
    assert r.forgetting[2][0] == pytest.approx(0.2)
    assert r.forgetting[2][1] == 0.0
    assert r.forgetting[0][1] is None
    assert r.ap_old == pytest.approx(0.45) and r.ap_new == 0.7
    assert r.ap_seen == pytest.approx((0.3 + 0.6 + 0.7) / 3)


def test_constant_rows_give_zero_forgetting():
    rows = [[0.5, None], [0.5, 0.6]]
    r = aggregate("oracle", ["a", "b"], rows, 0.1)
    assert all(v in (None, 0.0) for row in r.forgetting for v in row)


def test_missing_rows_rejected():
    with pytest.raises(DataError, match="incomplete"):
        aggregate("m", ["a", "b", "c"], [[0.1, None, None], [0.1, 0.2, None]], 0.0)
    with pytest.raises(DataError, match="incomplete"):
        aggregate("m", ["a", "b"], [[0.1, None]], 0.0)
    with pytest.raises(DataError, match="incomplete"):
        aggregate("m", ["a"], [], 0.0)
