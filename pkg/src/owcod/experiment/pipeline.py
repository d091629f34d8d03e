"""End-to-end runs: base, continual training, evaluation, ablations, manifests."""

from __future__ import annotations

import hashlib
import json
import os
import pathlib
import time
from dataclasses import asdict, dataclass, field, replace

from .. import __file__ as _pkg_init
from ..bench.metrics import EvalReport
from ..bench.report import attach_ranks, leaderboard, to_csv
from ..errors import DataError
from ..fileio import atomic_write_text, sha256_file
from ..memory.pool import MemoryPool, save_pool
from .access import DataAccess
from .checkpoint import VERSION as CHECKPOINT_VERSION
from .checkpoint import load_base, save_base
from .config import ExperimentConfig
from .evaluation import EVAL_MODES, Predictor, _score, evaluate, report_json
from .pretrain import make_task, pretrain_base
from .training import continual_train, loss_curves

PKG_ROOT = pathlib.Path(_pkg_init).parent


def source_fingerprint(subpaths=None) -> str:
    """SHA-256 over the package's Python sources (path + content, sorted)."""
    h = hashlib.sha256()
    files = sorted(PKG_ROOT.rglob("*.py"))
    for f in files:
        rel = f.relative_to(PKG_ROOT).as_posix()
        if subpaths is not None and not any(rel.startswith(s) for s in subpaths):
            continue
        h.update(rel.encode())
        h.update(f.read_bytes())
    return h.hexdigest()


@dataclass
class RunManifest:
    config: dict
    source_fingerprint: str
    task_digest: str = ""
    base: dict = field(default_factory=dict)
    steps: list = field(default_factory=list)      # chosen hyper-parameters and curves per step
    wall_clock: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)    # relative path -> sha256

    def record(self, out_dir, *paths) -> None:
        for p in paths:
            self.outputs[os.path.relpath(p, out_dir)] = sha256_file(p)

    def write(self, out_dir) -> str:
        path = os.path.join(out_dir, "manifest.json")
        atomic_write_text(path, json.dumps(asdict(self), sort_keys=True, indent=2) + "\n")
        return path

    @staticmethod
    def verify(out_dir) -> list:
        """Files whose digest no longer matches; empty when the run directory is intact."""
        with open(os.path.join(out_dir, "manifest.json"), encoding="utf-8") as f:
            m = json.load(f)
        bad = []
        for rel, digest in sorted(m["outputs"].items()):
            p = os.path.join(out_dir, rel)
            if not os.path.exists(p) or sha256_file(p) != digest:
                bad.append(rel)
        return bad


# ---------------------------------------------------------------- base


BASE_SOURCES = ("tensor.py", "optim.py", "rng.py", "detector/", "bench/synthetic.py", "bench/metrics.py",
                "experiment/pretrain.py", "experiment/checkpoint.py")


def base_key(cfg: ExperimentConfig, task) -> str:
    d = {"seed": cfg.seed, "detector": cfg.detector, "pretrain": asdict(cfg.pretrain),
         "retrieval": asdict(cfg.retrieval), "task": task.digest(), "format": CHECKPOINT_VERSION,
         "source": source_fingerprint(BASE_SOURCES)}
    # the pretrain split does not depend on shots or the continual subsets, but keep the key simple
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:20]


def obtain_base(cfg: ExperimentConfig, task, cache_dir=None, out_dir=None, access=None, progress=None):
    """Load the base from ``cache_dir`` when a matching checkpoint exists, otherwise pretrain it.

    Returns (detector, info) where info carries the pretrain AP and the cache path.
    """
    path = None
    if cache_dir is not None:
        os.makedirs(cache_dir, exist_ok=True)
        path = os.path.join(cache_dir, f"base-{base_key(cfg, task)}.owck")
        if os.path.exists(path):
            det, meta = load_base(path)
            return det, {**meta, "checkpoint": path, "cached": True}
    res = pretrain_base(cfg, task, access=access, out_dir=out_dir, progress=progress)
    meta = {"pretrain_ap": res.ap, "pretrain_ap50": res.ap50, "curve": [[i, l] for i, l in res.curve],
            "seconds": round(res.seconds, 1)}
    if path is not None:
        save_base(res.detector, path, {k: v for k, v in meta.items() if k != "seconds"})
    return res.detector, {**meta, "checkpoint": path, "cached": False}


# ---------------------------------------------------------------- continual run


@dataclass
class RunResult:
    pool: MemoryPool
    logs: list
    reports: dict = field(default_factory=dict)   # mode -> EvalReport
    access: DataAccess | None = None


def train_pool(detector, task, cfg: ExperimentConfig, access=None, progress=None):
    """Continual training with the oracle after-step AP of each new subset recorded in its log."""
    access = access or DataAccess(task)
    predictor = Predictor(detector, cfg.retrieval)

    def after_step(pool, log):
        sub = task.subsets[log.step - 1]
        with access.phase("after-step-eval"):
            samples = access.eval(sub.name)
        r, _, _ = _score(predictor, "oracle", pool, samples, list(sub.classes), log.step)
        log.after_step_ap = float(r.ap)

    pool, logs = continual_train(detector, task, cfg, access=access, after_step=after_step, progress=progress)
    return pool, logs


def run_pipeline(cfg: ExperimentConfig, out_dir, cache_dir=None, modes=EVAL_MODES, progress=None) -> RunResult:
    """Base -> continual training -> every evaluation mode; all artifacts under ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    clock = {}
    t0 = time.perf_counter()
    task = make_task(cfg)
    access = DataAccess(task)
    det, base_info = obtain_base(cfg, task, cache_dir=cache_dir, out_dir=out_dir, access=access)
    clock["base"] = time.perf_counter() - t0
    base_digest = det.params.fingerprint().hex()

    t1 = time.perf_counter()
    pool, logs = train_pool(det, task, cfg, access=access, progress=progress)
    clock["train"] = time.perf_counter() - t1
    if det.params.fingerprint().hex() != base_digest:
        raise DataError("base weights changed during the run")

    manifest = RunManifest(cfg.to_dict(), source_fingerprint(), task.digest(),
                           {k: v for k, v in base_info.items() if k not in ("curve", "checkpoint", "cached")})
    manifest.base["params_sha256"] = hashlib.sha256(det.params.fingerprint()).hexdigest()
    pool_path = os.path.join(out_dir, "pool.owmp")
    save_pool(pool, pool_path)
    log_path = os.path.join(out_dir, "train_log.json")
    atomic_write_text(log_path, json.dumps([l.to_dict() for l in logs], sort_keys=True, indent=2) + "\n")
    manifest.steps = [{"step": l.step, "after_step_ap": l.after_step_ap,
                       "chosen": [{"stage": s.stage, "lr": s.lr, "epochs": s.epochs} for s in l.stages]}
                      for l in logs]
    manifest.record(out_dir, pool_path, log_path)

    t2 = time.perf_counter()
    result = RunResult(pool, logs, access=access)
    predictor = Predictor(det, cfg.retrieval)
    for mode in modes:
        result.reports[mode] = evaluate(det, pool, task, mode, cfg.retrieval, access=access, out_dir=out_dir,
                                        predictor=predictor)
    clock["eval"] = time.perf_counter() - t2
    manifest.record(out_dir, *write_reports(out_dir, list(result.reports.values())))
    manifest.record(out_dir, *sorted(str(p) for p in pathlib.Path(out_dir, "predictions").rglob("*.json")))
    manifest.wall_clock = {k: round(v, 2) for k, v in clock.items()}
    curves = loss_curves(logs)
    for s in manifest.steps:
        s["curves"] = {k: v for k, v in curves.items() if k.startswith(f"step{s['step']}/")}
    manifest.write(out_dir)
    return result


def write_reports(out_dir, reports, stem="") -> list:
    """One JSON per report plus the ranked CSV and leaderboard for the set."""
    attach_ranks(reports)
    d = os.path.join(out_dir, "reports")
    os.makedirs(d, exist_ok=True)
    paths = []
    for r in reports:
        p = os.path.join(d, f"{stem}{r.method}.json")
        atomic_write_text(p, report_json(r))
        paths.append(p)
    p = os.path.join(d, f"{stem}summary.csv")
    atomic_write_text(p, to_csv(reports))
    paths.append(p)
    p = os.path.join(d, f"{stem}leaderboard.txt")
    atomic_write_text(p, leaderboard(reports))
    paths.append(p)
    return paths


def load_report(path) -> EvalReport:
    with open(path, encoding="utf-8") as f:
        d = json.load(f)
    try:
        return EvalReport(**d)
    except TypeError as e:
        raise DataError(f"{path}: not an evaluation report ({e})") from None


# ---------------------------------------------------------------- ablations


ABLATIONS = ("components", "layers", "joint", "oracle", "shots")
SHOT_COUNTS = (1, 3, 5, 10)


def run_ablation(kind: str, cfg: ExperimentConfig, out_dir, cache_dir=None, progress=None) -> list:
    """Train the pools each protocol needs and return the ranked reports (also written to ``out_dir``)."""
    if kind not in ABLATIONS:
        raise DataError(f"unknown ablation {kind!r}; expected one of {ABLATIONS}")
    os.makedirs(out_dir, exist_ok=True)
    task = make_task(cfg)
    det, _ = obtain_base(cfg, task, cache_dir=cache_dir, out_dir=out_dir)
    rc = cfg.retrieval

    def trained(detector, c=cfg, t=task):
        pool, _ = continual_train(detector, t, c, progress=progress)
        return pool

    reports = []
    if kind == "components":
        prompt_only = det.with_memory_layers(0)
        p_con = trained(prompt_only)
        p_full = trained(det)
        reports = [
            evaluate(det, None, task, "zero-shot", rc, method="zero-shot"),
            evaluate(prompt_only, p_con, task, "no-retrieval-last-triplet", rc, method="+concept"),
            evaluate(prompt_only, p_con, task, "threshold", rc, method="+concept+retrieval"),
            evaluate(det, p_full, task, "no-retrieval-last-triplet", rc, method="+concept+interaction"),
            evaluate(det, p_full, task, "threshold", rc, method="full"),
        ]
    elif kind == "layers":
        for n in range(det.config.fusion_layers + 1):
            view = det.with_memory_layers(n)
            reports.append(evaluate(view, trained(view), task, "threshold", rc, method=f"layers={n}"))
    elif kind == "joint":
        for mode in ("decoupled", "joint"):
            c = replace(cfg, schedule=replace(cfg.schedule, mode=mode))
            reports.append(evaluate(det, trained(det, c), task, "threshold", rc, method=mode))
    elif kind == "oracle":
        pool = trained(det)
        reports = [evaluate(det, pool, task, m, rc, method=m) for m in ("threshold", "oracle")]
    else:
        reports.append(evaluate(det, None, task, "zero-shot", rc, method="zero-shot"))
        for shots in SHOT_COUNTS:
            c = cfg.with_overrides(shots=shots)
            t = make_task(c)
            reports.append(evaluate(det, trained(det, c, t), t, "threshold", rc, method=f"shots={shots}"))
    write_reports(out_dir, reports, stem=f"{kind}-")
    return reports
