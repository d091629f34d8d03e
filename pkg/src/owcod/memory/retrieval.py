"""Threshold retrieval over the memory pool and multi-memory inference with NMS merging."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..detector.boxes import box_area, cxcywh_to_xyxy, pairwise_iou
from ..detector.text import build_class_sentence
from ..detector.types import EncodedImage
from ..errors import ConfigError, DataError
from .pool import MemoryPool


@dataclass(frozen=True)
class RetrievalConfig:
    tau: float = 0.89
    nms_iou: float = 0.5
    score_floor: float = 0.0

    def __post_init__(self):
        if not -1.0 < self.tau <= 1.0:
            raise ConfigError(f"tau={self.tau} outside (-1, 1]")
        if not 0.0 < self.nms_iou < 1.0:
            raise ConfigError(f"nms_iou={self.nms_iou} outside (0, 1)")
        if not 0.0 <= self.score_floor <= 1.0:
            raise ConfigError(f"score_floor={self.score_floor} outside [0, 1]")


@dataclass(frozen=True)
class RetrievalOutcome:
    steps: tuple          # retrieved step indices, ascending
    scores: dict          # step -> max cosine over that step's prototypes
    fallback: bool


def step_scores(g: np.ndarray, pool: MemoryPool) -> dict:
    g = np.asarray(g, dtype=np.float64)
    if abs(np.linalg.norm(g) - 1.0) > 1e-6:
        raise DataError(f"image embedding must be unit norm, got {np.linalg.norm(g)}")
    return {tr.step: float(np.max(tr.prototypes @ g)) for tr in pool.triplets}


def retrieve(g: np.ndarray, pool: MemoryPool, tau: float = 0.89) -> RetrievalOutcome:
    """Steps whose best prototype cosine reaches ``tau``; none retrieved means fallback.

    ``tau`` is a plain float here so thresholds outside the configured range
    (e.g. above 1 to force fallback) can be probed.
    """
    scores = step_scores(g, pool)
    steps = tuple(t for t, s in scores.items() if s >= tau)
    return RetrievalOutcome(steps, scores, not steps)


def oracle_retrieve(subset_step: int | None, pool: MemoryPool) -> RetrievalOutcome:
    """Ground-truth retrieval: the image's own step, or fallback for ``None`` (unseen)."""
    if subset_step is None:
        return RetrievalOutcome((), {}, True)
    if subset_step not in {tr.step for tr in pool.triplets}:
        raise DataError(f"unknown subset step {subset_step}")
    return RetrievalOutcome((subset_step,), {subset_step: 1.0}, False)


def nms(detections, iou_threshold: float = 0.5) -> list:
    """Greedy class-wise NMS.

    Order: score descending, then smaller box area, then input order.  A box is
    kept iff its IoU with every kept box of the same class is <= the threshold.
    """
    dets = list(detections)
    if not dets:
        return []
    xyxy = cxcywh_to_xyxy(np.array([d.box for d in dets], dtype=np.float64))
    area = box_area(xyxy)
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, area[i], i))
    kept = []
    by_class = {}
    for i in order:
        same = by_class.setdefault(dets[i].label, [])
        if same and np.max(pairwise_iou(xyxy[i:i + 1], xyxy[same])) > iou_threshold:
            continue
        same.append(i)
        kept.append(i)
    return [dets[i] for i in kept]


def postprocess(dets, config: RetrievalConfig):
    return [d for d in nms(dets, config.nms_iou) if d.score >= config.score_floor]


def base_predict(detector, image, labels, config: RetrievalConfig = RetrievalConfig()) -> list:
    """Frozen zero-shot detector with the standard post-processing."""
    sentence = build_class_sentence(list(labels), detector.config.vocab)
    return postprocess(detector.detect(image, sentence), config)


def predict_with(detector, enc: EncodedImage, outcome: RetrievalOutcome, pool: MemoryPool,
                 fallback_labels, config: RetrievalConfig = RetrievalConfig()) -> list:
    if outcome.fallback:
        return base_predict(detector, enc, fallback_labels, config)
    dets = []
    for t in outcome.steps:
        tr = pool.step(t)
        sentence = build_class_sentence(list(tr.labels), detector.config.vocab)
        dets += detector.detect(enc, sentence, tr.concept_memory(), tr.interaction_memory())
    return postprocess(dets, config)


def infer(detector, image, pool: MemoryPool, fallback_labels,
          config: RetrievalConfig = RetrievalConfig()) -> tuple[list, RetrievalOutcome]:
    """Encode once, retrieve by threshold, run the retrieved memories (or the base), merge."""
    enc = image if isinstance(image, EncodedImage) else detector.encode_image(image)
    outcome = retrieve(enc.global_embedding, pool, config.tau)
    return predict_with(detector, enc, outcome, pool, fallback_labels, config), outcome
