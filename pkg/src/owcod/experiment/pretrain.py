"""Seeded pretraining of the base detector on the pretrain split."""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass, field


from .. import tensor as T
from ..bench.metrics import compute_ap, ground_truth
from ..bench.synthetic import generate_synthetic_task
from ..detector.config import DetectorConfig
from ..detector.loss import detection_loss
from ..detector.model import Detector
from ..detector.text import build_class_sentence, build_vocab
from ..errors import ConfigError, NumericalError
from ..fileio import atomic_write_text
from ..memory.retrieval import base_predict
from ..optim import OptimizerState, adamw_step
from ..rng import stream
from .access import DataAccess
from .config import ExperimentConfig


class PretrainError(NumericalError):
    """Base training missed its AP floor or diverged; ``curve_path`` holds the loss curve."""

    def __init__(self, message, curve_path=None):
        super().__init__(message if curve_path is None else f"{message} (curve written to {curve_path})")
        self.curve_path = curve_path


def make_task(cfg: ExperimentConfig):
    t = cfg.task
    return generate_synthetic_task(cfg.seed, T=t.T, classes_per_subset=t.classes_per_subset, shots=t.shots,
                                   eval_size=t.eval_size, unseen_eval_size=t.unseen_eval_size,
                                   n_pretrain_classes=t.n_pretrain_classes, n_unseen_classes=t.n_unseen_classes,
                                   pretrain_images=t.pretrain_images, image_size=t.image_size,
                                   max_instances=t.max_instances,
                                   n_queries=cfg.detector.get("n_queries", DetectorConfig.n_queries))


def detector_config(cfg: ExperimentConfig, task) -> DetectorConfig:
    dc = DetectorConfig(**{**cfg.detector, "vocab": build_vocab(task.all_class_names())})
    if dc.image_size != task.image_size:
        raise ConfigError(f"detector sees {dc.image_size}px images but the task renders {task.image_size}px")
    return dc


def sampled_names(rng, present, classes) -> list:
    """Ground-truth classes plus a random number of random negatives, shuffled."""
    pos = sorted(set(present))
    neg = [c for c in classes if c not in pos]
    k = int(rng.integers(0, len(neg) + 1))
    names = pos + [neg[i] for i in rng.permutation(len(neg))[:k]]
    return [names[i] for i in rng.permutation(len(names))]


@dataclass
class PretrainResult:
    detector: Detector
    curve: list = field(default_factory=list)    # (iteration, smoothed loss)
    ap: float = 0.0
    ap50: float = 0.0
    seconds: float = 0.0


def pretrain_base(cfg: ExperimentConfig, task, access: DataAccess | None = None, out_dir=None,
                  progress=None) -> PretrainResult:
    """Train the detector on the pretrain classes, check the AP floor, centre the embedding, freeze."""
    access = access or DataAccess(task)
    pc = cfg.pretrain
    det = Detector(detector_config(cfg, task), cfg.seed)
    if pc.freeze_text:
        for name in det.params.names():
            if name.startswith("txt."):
                det.params.set_trainable(name, False)
    vocab = det.config.vocab
    classes = list(task.pretrain.classes)
    full = build_class_sentence(classes, vocab)
    rng = stream(cfg.seed, "pretrain-order")
    opt = OptimizerState(lr=pc.lr, horizon=pc.iterations, weight_decay=pc.weight_decay)
    curve, smooth = [], None
    t0 = time.perf_counter()
    with access.phase("pretrain"):
        images = access.train(task.pretrain.name)
        for it in range(pc.iterations):
            s = images[int(rng.integers(len(images)))]
            names = sampled_names(rng, s.labels, classes) if pc.sample_negatives else classes
            sentence = build_class_sentence(names, vocab) if pc.sample_negatives else full
            index = {c: i for i, c in enumerate(names)}
            det.params.zero_grad()
            out = det.forward(s.pixels, sentence)
            loss = detection_loss(out.boxes, out.logits, s.boxes, [index[l] for l in s.labels])
            value = loss.item()
            if not math.isfinite(value):
                raise PretrainError(f"non-finite pretraining loss at iteration {it}",
                                    _dump_curve(out_dir, curve))
            T.backward(loss)
            adamw_step(det.params, opt)
            smooth = value if smooth is None else 0.98 * smooth + 0.02 * value
            if it % pc.log_every == 0 or it == pc.iterations - 1:
                curve.append((it, smooth))
                if progress:
                    progress(it, smooth)
        center_images = [s.pixels for s in images]
    with access.phase("pretrain-check"):
        held_out = access.eval(task.pretrain.name)
    preds = {s.image_id: base_predict(det, s.pixels, classes, cfg.retrieval) for s in held_out}
    r = compute_ap(preds, ground_truth(held_out), classes)
    if r.ap is None or r.ap < pc.ap_floor:
        raise PretrainError(f"pretrain-split AP {r.ap} below floor {pc.ap_floor}", _dump_curve(out_dir, curve))
    det.set_embedding_center(center_images)
    det.freeze()
    return PretrainResult(det, curve, float(r.ap), float(r.ap50), time.perf_counter() - t0)


def _dump_curve(out_dir, curve):
    if out_dir is None:
        return None
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "pretrain_curve.json")
    atomic_write_text(path, json.dumps([[i, l] for i, l in curve]))
    return path
