import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from owcod.detector.boxes import cxcywh_to_xyxy, pairwise_iou
from owcod.detector.config import DetectorConfig
from owcod.detector.model import Detector
from owcod.detector.text import build_vocab
from owcod.detector.types import Detection
from owcod.errors import ConfigError, DataError
from owcod.memory.pool import MemoryPool, MemoryTriplet, init_step_memories, memorize
from owcod.memory.retrieval import (
    RetrievalConfig,
    base_predict,
    infer,
    nms,
    oracle_retrieve,
    retrieve,
)
from owcod.rng import stream

D = 4


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def pool_of(prototype_sets, cfg=None):
    cfg = cfg or DetectorConfig(d_model=D, n_heads=1, fusion_layers=1, prompt_length=1, lora_rank=1,
                                vocab=(".", "x"))
    pool = MemoryPool()
    for i, (labels, protos) in enumerate(prototype_sets):
        con, inc = init_step_memories(pool, cfg, stream(0, i))
        pool = memorize(pool, MemoryTriplet.create(i + 1, labels, protos, con, inc))
    return pool


def test_identical_vector_retrieves_its_step():
    p = unit([1, 2, 3, 4])
    out = retrieve(p, pool_of([(("a",), [p])]))
    assert out.steps == (1,) and not out.fallback
    assert out.scores[1] == pytest.approx(1.0)


def test_orthogonal_vector_falls_back():
    out = retrieve(unit([0, 0, 0, 1]), pool_of([(("a", "b"), [unit([1, 0, 0, 0]), unit([0, 1, 0, 0])])]))
    assert out.fallback and out.steps == ()


def test_constructed_scores_retrieve_only_the_first_step():
    g = unit([1, 0, 0, 0])
    a = np.array([0.95, np.sqrt(1 - 0.95**2), 0, 0])
    b = np.array([0.50, 0, np.sqrt(1 - 0.25), 0])
    out = retrieve(g, pool_of([(("a",), [a]), (("b",), [b])]), 0.89)
    assert out.steps == (1,)
    assert out.scores == {1: pytest.approx(0.95), 2: pytest.approx(0.50)}


def test_step_score_is_max_over_classes():
    g = unit([1, 0, 0, 0])
    protos = [unit([0, 1, 0, 0]), unit([1, 0.1, 0, 0])]
    out = retrieve(g, pool_of([(("a", "b"), protos)]))
    assert out.scores[1] == pytest.approx(float(protos[1] @ g))


def test_empty_pool_always_falls_back():
    assert retrieve(unit([1, 0, 0, 0]), MemoryPool()).fallback


def test_non_unit_embedding_rejected():
    with pytest.raises(DataError):
        retrieve(np.ones(D), MemoryPool())


def test_retrieval_config_validation():
    for kw in ({"tau": 1.5}, {"tau": -1.0}, {"nms_iou": 0.0}, {"nms_iou": 1.0}, {"score_floor": 2.0}):
        with pytest.raises(ConfigError):
            RetrievalConfig(**kw)


vec = st.lists(st.floats(-1, 1, allow_nan=False), min_size=D, max_size=D).filter(
    lambda v: np.linalg.norm(v) > 1e-3)


@settings(max_examples=80, deadline=None)
@given(vec, st.lists(vec, min_size=1, max_size=4), st.floats(-1, 1), st.floats(-1, 1))
def test_threshold_monotone(g, protos, t1, t2):
    pool = pool_of([((f"c{i}",), [unit(p)]) for i, p in enumerate(protos)])
    lo, hi = sorted((t1, t2))
    assert set(retrieve(unit(g), pool, hi).steps) <= set(retrieve(unit(g), pool, lo).steps)
    assert retrieve(unit(g), pool, 1.0 + 1e-9).fallback
    assert len(retrieve(unit(g), pool, -1.0).steps) == len(protos)
    out = retrieve(unit(g), pool, lo)
    assert all(out.scores[t] >= lo for t in out.steps)
    assert out.fallback == (not any(s >= lo for s in out.scores.values()))


def test_oracle_retrieval():
    pool = pool_of([(("a",), [unit([1, 0, 0, 0])])] * 3)
    assert oracle_retrieve(3, pool).steps == (3,)
    assert oracle_retrieve(None, pool).fallback
    with pytest.raises(DataError):
        oracle_retrieve(4, pool)


# ---------------------------------------------------------------- nms


def xyxy_det(box, score, label="a"):
    x0, y0, x1, y1 = box
    return Detection(((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0), label, score)


def test_single_detection_unchanged():
    d = [xyxy_det((0.1, 0.1, 0.3, 0.3), 0.4)]
    assert nms(d) == d


def test_duplicate_box_suppressed():
    a, b = xyxy_det((0.1, 0.1, 0.3, 0.3), 0.9), xyxy_det((0.1, 0.1, 0.3, 0.3), 0.8)
    assert nms([b, a], 0.5) == [a]


def test_slightly_overlapping_boxes_both_kept():
    # unit-square boxes shifted by 0.9 overlap by IoU 0.1 / 1.9
    a = xyxy_det((0.0, 0.0, 0.5, 0.5), 0.9)
    b = xyxy_det((0.45, 0.0, 0.95, 0.5), 0.8)
    iou = pairwise_iou(cxcywh_to_xyxy(np.array([a.box])), cxcywh_to_xyxy(np.array([b.box])))[0, 0]
    assert iou == pytest.approx(0.1 / 1.9)
    assert nms([a, b], 0.5) == [a, b]


def test_different_classes_do_not_suppress():
    a = xyxy_det((0.1, 0.1, 0.3, 0.3), 0.9, "a")
    b = xyxy_det((0.1, 0.1, 0.3, 0.3), 0.8, "b")
    assert nms([a, b]) == [a, b]


def test_score_ties_prefer_smaller_box_then_input_order():
    big = xyxy_det((0.1, 0.1, 0.5, 0.5), 0.7)
    small = xyxy_det((0.1, 0.1, 0.45, 0.45), 0.7)
    assert nms([big, small], 0.5) == [small]
    first = xyxy_det((0.1, 0.1, 0.3, 0.3), 0.7)
    second = xyxy_det((0.1, 0.1, 0.3, 0.3), 0.7)
    assert nms([first, second], 0.5)[0] is first


box_st = st.tuples(st.floats(0.05, 0.95), st.floats(0.05, 0.95), st.floats(0.02, 0.5), st.floats(0.02, 0.5))
det_st = st.builds(lambda b, s, l: Detection(b, l, s), box_st, st.sampled_from([0.1, 0.5, 0.9, 0.3]),
                   st.sampled_from(["a", "b"]))


@settings(max_examples=100, deadline=None)
@given(st.lists(det_st, max_size=12), st.floats(0.1, 0.9))
def test_nms_properties(dets, thr):
    kept = nms(dets, thr)
    assert all(any(k is d for d in dets) for k in kept)
    assert [k.score for k in kept] == sorted((k.score for k in kept), reverse=True)
    for label in ("a", "b"):
        same = [k for k in kept if k.label == label]
        if len(same) > 1:
            x = cxcywh_to_xyxy(np.array([k.box for k in same]))
            iou = pairwise_iou(x, x)
            np.fill_diagonal(iou, 0)
            assert iou.max() <= thr
    assert nms(kept, thr) == kept


# ---------------------------------------------------------------- inference

NAMES = ["red circle", "blue square", "green ring", "white bar"]


@pytest.fixture(scope="module")
def tiny():
    cfg = DetectorConfig(d_model=8, n_heads=2, fusion_layers=2, n_queries=4, image_grid=4, patch_size=2,
                         prompt_length=2, lora_rank=2, vocab=build_vocab(NAMES), ffn_dim=8, text_ffn_dim=8,
                         decoder_layers=1, text_layers=1)
    return Detector(cfg, 0)


def trained_triplet(det, pool, labels, proto, seed):
    con, inc = init_step_memories(pool, det.config, stream(seed, "m"))
    rng = stream(seed, "perturb")
    con.prompt.data += rng.normal(size=con.prompt.shape)
    for layer in inc.layers:
        for a, b in layer.pairs.values():
            b.data += rng.normal(size=b.shape)
    return MemoryTriplet.create(pool.last_step + 1, labels, np.tile(proto, (len(labels), 1)), con, inc)


def image(seed):
    return np.random.default_rng(seed).random((8, 8, 3))


def test_empty_pool_inference_equals_base(tiny):
    img = image(0)
    dets, outcome = infer(tiny, img, MemoryPool(), NAMES[:2])
    assert outcome.fallback
    assert dets == base_predict(tiny, img, NAMES[:2])


def test_single_retrieved_triplet_output(tiny):
    img = image(1)
    g = tiny.encode_image(img).global_embedding
    tr = trained_triplet(tiny, MemoryPool(), ("red circle", "green ring"), g, 1)
    pool = memorize(MemoryPool(), tr)
    dets, outcome = infer(tiny, img, pool, NAMES)
    assert outcome.steps == (1,)
    from owcod.detector.text import build_class_sentence
    raw = tiny.detect(img, build_class_sentence(list(tr.labels), tiny.config.vocab),
                      tr.concept_memory(), tr.interaction_memory())
    assert dets == nms(raw, 0.5)
    assert {d.label for d in dets} <= set(tr.labels)


def test_two_triplets_union_label_sets(tiny):
    img = image(2)
    g = tiny.encode_image(img).global_embedding
    pool = memorize(MemoryPool(), trained_triplet(tiny, MemoryPool(), ("red circle",), g, 1))
    pool = memorize(pool, trained_triplet(tiny, pool, ("blue square", "white bar"), g, 2))
    dets, outcome = infer(tiny, img, pool, NAMES)
    assert outcome.steps == (1, 2)
    assert {d.label for d in dets} <= {"red circle", "blue square", "white bar"}


def test_fallback_output_is_bit_identical_to_base(tiny):
    img = image(3)
    g = tiny.encode_image(img).global_embedding
    far = -g  # cosine -1 with the image
    pool = memorize(MemoryPool(), trained_triplet(tiny, MemoryPool(), ("red circle",), far, 1))
    dets, outcome = infer(tiny, img, pool, NAMES)
    assert outcome.fallback
    base = base_predict(tiny, img, NAMES)
    assert [(d.box, d.label, d.score) for d in dets] == [(d.box, d.label, d.score) for d in base]
