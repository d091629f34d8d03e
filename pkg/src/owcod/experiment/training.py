"""Few-shot continual training of per-step memories on top of the frozen base."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .. import tensor as T
from ..detector.loss import detection_loss
from ..detector.text import build_class_sentence
from ..errors import NumericalError
from ..memory.memories import memory_params
from ..memory.pool import MemoryPool, MemoryTriplet, build_prototypes, init_step_memories, memorize
from ..optim import OptimizerState, adamw_step
from ..rng import stream
from .access import DataAccess
from .config import ExperimentConfig


class DivergenceError(NumericalError):
    pass


@dataclass
class StageLog:
    stage: str                 # "concept", "interaction" or "joint"
    lr: float
    epochs: int
    epoch_losses: list         # mean train loss per epoch of the chosen run
    grid: list = field(default_factory=list)   # (lr, epochs, final-epoch loss) for every cell tried


@dataclass
class StepLog:
    step: int
    subset: str
    labels: tuple
    stages: list = field(default_factory=list)
    after_step_ap: float | None = None        # filled in by the harness, not by training

    def to_dict(self) -> dict:
        return {"step": self.step, "subset": self.subset, "labels": list(self.labels),
                "after_step_ap": self.after_step_ap,
                "stages": [{"stage": s.stage, "lr": s.lr, "epochs": s.epochs, "epoch_losses": s.epoch_losses,
                            "grid": [list(c) for c in s.grid]} for s in self.stages]}


def _snapshot(con, inc):
    return con.copy(), inc.copy()


def train_stage(detector, images, sentence, con, inc, train_con, train_inc, lr, epochs, weight_decay, rng,
                where=""):
    """Optimise the selected memories in place; returns the mean loss of every epoch."""
    store = memory_params(con, inc, train_con, train_inc)
    index = {c: i for i, c in enumerate(sentence.names)}
    opt = OptimizerState(lr=lr, horizon=epochs * len(images), weight_decay=weight_decay)
    losses = []
    for epoch in range(epochs):
        total = 0.0
        for i in rng.permutation(len(images)):
            s = images[i]
            store.zero_grad()
            detector.params.zero_grad()
            out = detector.forward(s.pixels, sentence, con, inc)
            loss = detection_loss(out.boxes, out.logits, s.boxes, [index[l] for l in s.labels])
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(f"{where}: non-finite loss at epoch {epoch + 1}, image {s.image_id} "
                                      f"(lr={lr}, completed epoch losses {losses})")
            T.backward(loss)
            adamw_step(store, opt)
            total += value
        losses.append(total / len(images))
    return losses


def _fit(detector, images, sentence, con, inc, train_con, train_inc, stage, sched, seed, step):
    """One stage, with or without the (LR, epochs) grid; the chosen memories are written back."""
    cells = ([(lr, ep) for lr in sched.lr_candidates for ep in sched.epoch_candidates]
             if sched.grid_search else [(sched.lr, sched.epochs)])
    best = None
    grid = []
    for lr, ep in cells:
        c, i = _snapshot(con, inc)
        rng = stream(seed, "train-order", step, stage)   # same order for every cell
        try:
            losses = train_stage(detector, images, sentence, c, i, train_con, train_inc, lr, int(ep),
                                 sched.weight_decay, rng, where=f"step {step} {stage}")
        except DivergenceError:
            if not sched.grid_search:
                raise
            grid.append((lr, int(ep), math.inf))
            continue
        grid.append((lr, int(ep), losses[-1]))
        if best is None or losses[-1] < best[0]:
            best = (losses[-1], lr, int(ep), losses, c, i)
    if best is None:
        raise DivergenceError(f"step {step} {stage}: every grid cell diverged")
    _, lr, ep, losses, c, i = best
    con.prompt.data[...] = c.prompt.data
    for dst, src in zip(inc.layers, i.layers):
        for name, (a, b) in dst.pairs.items():
            a.data[...] = src.pairs[name][0].data
            b.data[...] = src.pairs[name][1].data
    return StageLog(stage, lr, ep, losses, grid if sched.grid_search else [])


def train_step(detector, pool: MemoryPool, step: int, labels, images, cfg: ExperimentConfig):
    """Initialise from the previous triplet, optimise, and return (con, inc, stage logs)."""
    con, inc = init_step_memories(pool, detector.config, stream(cfg.seed, "memory-init", step))
    sentence = build_class_sentence(list(labels), detector.config.vocab)
    sched = cfg.schedule
    has_inc = bool(inc.layers)
    if sched.mode == "joint":
        plan = [("joint", True, has_inc)]
    else:
        plan = [("concept", True, False)] + ([("interaction", False, True)] if has_inc else [])
    logs = [_fit(detector, images, sentence, con, inc, tc, ti, stage, sched, cfg.seed, step)
            for stage, tc, ti in plan]
    return con, inc, logs


def continual_train(detector, task, cfg: ExperimentConfig, access: DataAccess | None = None,
                    after_step=None, progress=None):
    """Steps 1..T in order; returns the pool and per-step logs.

    ``after_step(pool, step_log)`` runs outside the training phase, so it may
    evaluate; training itself only ever sees the subsets' train images.
    """
    access = access or DataAccess(task)
    before = detector.params.fingerprint()
    pool = MemoryPool(config=detector.config.to_dict())
    logs = []
    embed = lambda px: detector.encode_image(px).global_embedding
    for t, sub in enumerate(task.subsets, start=1):
        with access.phase("train"):
            images = access.train(sub.name)
            con, inc, stages = train_step(detector, pool, t, sub.classes, images, cfg)
            with T.no_grad():
                protos = build_prototypes(images, sub.classes, embed, task.image_size,
                                          stream(cfg.seed, "prototypes", t), n_crops=cfg.n_crops)
            pool = memorize(pool, MemoryTriplet.create(t, sub.classes, protos, con, inc))
        log = StepLog(t, sub.name, tuple(sub.classes), stages)
        logs.append(log)
        if progress:
            progress(log)
        if after_step is not None:
            after_step(pool, log)
    if detector.params.fingerprint() != before:
        raise NumericalError("base parameters changed during continual training")
    return pool, logs


def loss_curves(logs) -> dict:
    return {f"step{l.step}/{s.stage}": list(map(float, s.epoch_losses)) for l in logs for s in l.stages}

