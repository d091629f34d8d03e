import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from owcod.bench.synthetic import CANVAS_LEVELS, domain_canvases, generate_synthetic_task
from owcod.errors import ConfigError
from owcod.rng import stream

SMALL = dict(T=3, classes_per_subset=2, shots=2, eval_size=3, unseen_eval_size=4, pretrain_images=6,
             image_size=16, n_pretrain_classes=6, n_unseen_classes=3)


def test_label_sets_are_disjoint():
    task = generate_synthetic_task(1, **SMALL)
    groups = [set(s.classes) for s in task.subsets] + [set(task.unseen.classes), set(task.pretrain.classes)]
    flat = [c for g in groups for c in g]
    assert len(flat) == len(set(flat))


def test_generation_is_deterministic():
    a = generate_synthetic_task(4, **SMALL)
    b = generate_synthetic_task(4, **SMALL)
    assert a.digest() == b.digest()
    assert generate_synthetic_task(5, **SMALL).digest() != a.digest()


def test_shots_and_sizes():
    task = generate_synthetic_task(0, **SMALL)
    for sub in task.subsets:
        assert len(sub.train) == SMALL["shots"] * len(sub.classes)
        assert len(sub.eval) == SMALL["eval_size"]
        for k in sub.classes:
            assert sum(k in s.labels for s in sub.train) >= SMALL["shots"]
    assert len(task.unseen.eval) == SMALL["unseen_eval_size"]
    assert not task.unseen.train


def test_eval_images_do_not_depend_on_shots():
    a = generate_synthetic_task(2, **SMALL)
    b = generate_synthetic_task(2, **{**SMALL, "shots": 3})
    for sa, sb in zip(a.subsets, b.subsets):
        assert all(np.array_equal(x.pixels, y.pixels) for x, y in zip(sa.eval, sb.eval))


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10**6), max_instances=st.integers(1, 4))
def test_instances_fit_queries_and_unit_square(seed, max_instances):
    task = generate_synthetic_task(seed, **SMALL, max_instances=max_instances, n_queries=4)
    for split in task.splits():
        for s in split.train + split.eval:
            assert 1 <= len(s.boxes) <= max_instances
            assert s.pixels.shape == (16, 16, 3)
            assert s.pixels.min() >= 0 and s.pixels.max() <= 1
            assert set(s.labels) <= set(split.classes)


def test_more_instances_than_queries_rejected():
    with pytest.raises(ConfigError):
        generate_synthetic_task(0, **SMALL, max_instances=5, n_queries=4)


def test_class_budget_enforced():
    with pytest.raises(ConfigError):
        generate_synthetic_task(0, **{**SMALL, "T": 20})


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), count=st.integers(1, 26))
def test_domain_canvases_distinct_and_corners_first(seed, count):
    c = domain_canvases(stream(seed, "canvases"), count)
    assert len(c) == count == len(set(c))
    assert all(v in CANVAS_LEVELS for p in c for v in p)
    corners = [p for p in c if CANVAS_LEVELS[1] not in p]
    assert c[:len(corners)] == corners and len(corners) == min(count, 8)


def test_canvases_repeat_past_the_lattice():
    c = domain_canvases(stream(0, "canvases"), 30)
    assert c[26:] == c[:4]
