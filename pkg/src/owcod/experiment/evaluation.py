"""Evaluation modes over a trained pool and the frozen base."""

from __future__ import annotations

import json
import os

from .. import tensor as T
from ..bench.coco import dataset_from_samples, predictions_document
from ..bench.metrics import EvalReport, aggregate, compute_ap, ground_truth
from ..detector.text import build_class_sentence
from ..errors import DataError
from ..fileio import atomic_write_text
from ..memory.pool import MemoryPool, count_added_params
from ..memory.retrieval import RetrievalConfig, postprocess, base_predict, oracle_retrieve, predict_with, retrieve
from .access import DataAccess

EVAL_MODES = ("threshold", "oracle", "zero-shot", "no-retrieval-last-triplet")


def check_pool(pool: MemoryPool | None, detector, task, mode: str) -> None:
    if mode not in EVAL_MODES:
        raise DataError(f"unknown evaluation mode {mode!r}; expected one of {EVAL_MODES}")
    if mode == "zero-shot":
        return
    if pool is None:
        raise DataError(f"mode {mode!r} needs a memory pool")
    if pool.config and pool.config != detector.config.to_dict():
        raise DataError("pool was trained for a different detector configuration")
    if len(pool) != task.T:
        raise DataError(f"pool holds {len(pool)} steps but the task has {task.T} subsets")
    for tr, sub in zip(pool.triplets, task.subsets):
        if tuple(tr.labels) != tuple(sub.classes):
            raise DataError(f"pool step {tr.step} labels {list(tr.labels)} do not match {sub.name} {list(sub.classes)}")


class Predictor:
    """One evaluation mode bound to a pool prefix; images are encoded once and cached."""

    def __init__(self, detector, retrieval: RetrievalConfig, encoded: dict | None = None):
        self.detector = detector
        self.retrieval = retrieval
        self.encoded = {} if encoded is None else encoded

    def encode(self, sample):
        enc = self.encoded.get(sample.image_id)
        if enc is None:
            with T.no_grad():
                enc = self.encoded[sample.image_id] = self.detector.encode_image(sample.pixels)
        return enc

    def predict(self, mode, pool, sample, labels, step):
        """``step`` is the image's subset index (1-based) or None for unseen images."""
        enc = self.encode(sample)
        if mode == "zero-shot":
            return base_predict(self.detector, enc, labels, self.retrieval), True
        if mode == "no-retrieval-last-triplet":
            tr = pool.triplets[-1]
            sentence = build_class_sentence(list(labels), self.detector.config.vocab)
            dets = self.detector.detect(enc, sentence, tr.concept_memory(), tr.interaction_memory())
            return postprocess(dets, self.retrieval), False
        if mode == "oracle":
            outcome = oracle_retrieve(step, pool)
        else:
            outcome = retrieve(enc.global_embedding, pool, self.retrieval.tau)
        return predict_with(self.detector, enc, outcome, pool, labels, self.retrieval), outcome.fallback


def _score(predictor, mode, pool, samples, labels, step):
    preds, fallbacks = {}, 0
    for s in samples:
        preds[s.image_id], fb = predictor.predict(mode, pool, s, labels, step)
        fallbacks += fb
    r = compute_ap(preds, ground_truth(samples), labels)
    return r, preds, fallbacks


def evaluate(detector, pool: MemoryPool | None, task, mode: str, retrieval: RetrievalConfig = RetrievalConfig(),
             access: DataAccess | None = None, out_dir=None, method: str | None = None,
             predictor: Predictor | None = None) -> EvalReport:
    """Per-subset AP after every step (forgetting matrix), final seen/unseen AP and fallback rates."""
    check_pool(pool, detector, task, mode)
    access = access or DataAccess(task)
    predictor = predictor or Predictor(detector, retrieval)
    names = [s.name for s in task.subsets]
    with access.phase("eval"):
        evals = {s.name: access.eval(s.name) for s in task.subsets}
        unseen = access.eval(task.unseen.name)

    rows, final_preds, ap50, seen_fb = [], {}, {}, 0
    steps = [task.T] if mode == "zero-shot" else range(1, task.T + 1)
    for t in steps:
        prefix = None if pool is None else MemoryPool(pool.triplets[:t], pool.config, pool.version)
        row = [None] * task.T
        for i, sub in enumerate(task.subsets[:t], start=1):
            r, preds, fb = _score(predictor, mode, prefix, evals[sub.name], list(sub.classes), i)
            row[i - 1] = float(r.ap)
            if t == task.T:
                final_preds[sub.name] = preds
                ap50[sub.name] = float(r.ap50)
                seen_fb += fb
        rows.append(row)
    r, preds, unseen_fb = _score(predictor, mode, pool, unseen, list(task.unseen.classes), None)
    final_preds[task.unseen.name] = preds
    ap50[task.unseen.name] = float(r.ap50)

    n_seen = sum(len(v) for v in evals.values())
    extra = {
        "ap50": ap50,
        "fallback_rate": {"seen": seen_fb / n_seen if n_seen else None,
                          "unseen": unseen_fb / len(unseen) if unseen else None},
        "added_params": {"base": detector.num_params()},
    }
    if mode != "zero-shot":
        extra["added_params"].update(count_added_params(detector.config, steps=len(pool)))
    report = aggregate(method or mode, names, rows, float(r.ap), **extra)
    if out_dir is not None:
        write_predictions(out_dir, method or mode, final_preds, task)
    return report


def write_predictions(out_dir, tag, final_preds, task) -> list:
    """COCO-format prediction arrays, one file per split."""
    d = os.path.join(out_dir, "predictions", tag)
    os.makedirs(d, exist_ok=True)
    paths = []
    for split in list(task.subsets) + [task.unseen]:
        ds = dataset_from_samples(split.eval, task.all_class_names(), task.image_size)
        doc = predictions_document(final_preds[split.name], ds)
        path = os.path.join(d, f"{split.name}.json")
        atomic_write_text(path, json.dumps(doc, sort_keys=True, indent=1) + "\n")
        paths.append(path)
    return paths


def report_json(report: EvalReport) -> str:
    return json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n"
