"""Command-line entry point: ``owcod <subcommand> [flags]``.

Exit codes: 0 success, 2 configuration error, 3 data or format error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .errors import DataError, OwcodError

log = logging.getLogger("owcod")


def _config(args):
    from .experiment.config import ExperimentConfig

    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    return cfg.with_overrides(seed=args.seed, tau=getattr(args, "tau", None), shots=getattr(args, "shots", None),
                              mode=getattr(args, "train_mode", None))


def _out(args) -> str:
    os.makedirs(args.out_dir, exist_ok=True)
    return args.out_dir


def _write_json(path, obj) -> None:
    from .fileio import atomic_write_text

    atomic_write_text(path, json.dumps(obj, sort_keys=True, indent=2) + "\n")


def cmd_gen_task(args) -> int:
    from .bench.coco import dataset_from_samples, gt_document
    from .experiment.pretrain import make_task

    cfg, out = _config(args), _out(args)
    task = make_task(cfg)
    summary = {"seed": task.seed, "digest": task.digest(), "image_size": task.image_size, "shots": task.shots,
               "splits": []}
    os.makedirs(os.path.join(out, "gt"), exist_ok=True)
    for split in task.splits():
        summary["splits"].append({"name": split.name, "classes": list(split.classes), "train": len(split.train),
                                  "eval": len(split.eval)})
        for part in ("train", "eval"):
            samples = getattr(split, part)
            if samples:
                ds = dataset_from_samples(samples, split.classes, task.image_size)
                _write_json(os.path.join(out, "gt", f"{split.name}-{part}.json"), gt_document(ds))
    _write_json(os.path.join(out, "task.json"), summary)
    print(f"task {task.digest()[:12]}: {task.T} subsets, unseen {len(task.unseen.eval)} images -> {out}")
    return 0


def _base(args, task, out):
    from .detector.text import build_vocab
    from .experiment.checkpoint import load_base

    path = args.base or os.path.join(out, "base.owck")
    if not os.path.exists(path):
        raise DataError(f"no base checkpoint at {path}; run `owcod pretrain` first or pass --base")
    det, _ = load_base(path)
    if det.config.vocab != build_vocab(task.all_class_names()):
        raise DataError(f"base checkpoint {path} was built for a different task vocabulary")
    return det


def cmd_pretrain(args) -> int:
    from .experiment.checkpoint import save_base
    from .experiment.pretrain import make_task, pretrain_base

    cfg, out = _config(args), _out(args)
    task = make_task(cfg)
    res = pretrain_base(cfg, task, out_dir=out,
                        progress=lambda it, loss: log.info("iter %d loss %.3f", it, loss))
    meta = {"pretrain_ap": res.ap, "pretrain_ap50": res.ap50}
    save_base(res.detector, os.path.join(out, "base.owck"), meta)
    _write_json(os.path.join(out, "pretrain.json"),
                {**meta, "curve": [[i, l] for i, l in res.curve], "seconds": round(res.seconds, 1),
                 "config": cfg.to_dict()})
    print(f"base AP {res.ap:.4f} (AP50 {res.ap50:.4f}) -> {os.path.join(out, 'base.owck')}")
    return 0


def cmd_train(args) -> int:
    from .experiment.pipeline import RunManifest, source_fingerprint, train_pool
    from .experiment.pretrain import make_task
    from .fileio import atomic_write_text
    from .memory.pool import save_pool

    cfg, out = _config(args), _out(args)
    task = make_task(cfg)
    det = _base(args, task, out)
    pool, logs = train_pool(det, task, cfg, progress=lambda l: log.info(
        "step %d: %s", l.step, ", ".join(f"{s.stage} lr={s.lr} epochs={s.epochs} loss={s.epoch_losses[-1]:.4f}"
                                         for s in l.stages)))
    pool_path, log_path = os.path.join(out, "pool.owmp"), os.path.join(out, "train_log.json")
    save_pool(pool, pool_path)
    atomic_write_text(log_path, json.dumps([l.to_dict() for l in logs], sort_keys=True, indent=2) + "\n")
    m = RunManifest(cfg.to_dict(), source_fingerprint(), task.digest())
    m.steps = [{"step": l.step, "after_step_ap": l.after_step_ap,
                "chosen": [{"stage": s.stage, "lr": s.lr, "epochs": s.epochs} for s in l.stages]} for l in logs]
    m.record(out, pool_path, log_path)
    m.write(out)
    print(f"pool with {len(pool)} triplets -> {pool_path}")
    return 0


def cmd_eval(args) -> int:
    from .bench.report import leaderboard
    from .experiment.evaluation import evaluate
    from .experiment.pipeline import write_reports
    from .experiment.pretrain import make_task
    from .memory.pool import load_pool

    cfg, out = _config(args), _out(args)
    task = make_task(cfg)
    det = _base(args, task, out)
    pool = None
    if args.mode != "zero-shot":
        path = args.pool or os.path.join(out, "pool.owmp")
        if not os.path.exists(path):
            raise DataError(f"no memory pool at {path}; run `owcod train` first or pass --pool")
        pool = load_pool(path)
    report = evaluate(det, pool, task, args.mode, cfg.retrieval, out_dir=out)
    write_reports(out, [report], stem="eval-")
    print(leaderboard([report]), end="")
    print(f"fallback rate: seen {report.fallback_rate['seen']:.3f}, unseen {report.fallback_rate['unseen']:.3f}")
    return 0


def cmd_ablate(args) -> int:
    from .bench.report import leaderboard
    from .experiment.pipeline import run_ablation

    cfg, out = _config(args), _out(args)
    reports = run_ablation(args.kind, cfg, out, cache_dir=args.cache_dir or os.path.join(out, "cache"))
    print(leaderboard(reports), end="")
    if args.kind == "layers":
        for r in reports:
            print(f"{r.method}: {r.added_params['per_step']} parameters per step")
    return 0


def cmd_rank(args) -> int:
    from .bench.report import attach_ranks, leaderboard, to_csv
    from .experiment.pipeline import load_report

    reports = [load_report(p) for p in args.reports]
    names = [r.method for r in reports]
    if len(set(names)) != len(names):
        raise DataError(f"duplicate method names among reports: {names}")
    attach_ranks(reports)
    print(leaderboard(reports), end="")
    if args.out_dir:
        out = _out(args)
        from .fileio import atomic_write_text

        atomic_write_text(os.path.join(out, "ranked.csv"), to_csv(reports))
        atomic_write_text(os.path.join(out, "leaderboard.txt"), leaderboard(reports))
    return 0


def cmd_score(args) -> int:
    from .bench.coco import load_coco_format
    from .bench.metrics import compute_ap

    ds = load_coco_format(args.gt, args.pred)
    r = compute_ap(ds.preds, ds.gts, sorted(set(ds.categories.values())))
    result = {"AP": r.ap, "AP50": r.ap50, "per_class": r.per_class}
    print(json.dumps(result, sort_keys=True, indent=2))
    if args.out_dir:
        _write_json(os.path.join(_out(args), "score.json"), result)
    return 0


def cmd_run(args) -> int:
    from .bench.report import leaderboard
    from .experiment.pipeline import run_pipeline

    cfg, out = _config(args), _out(args)
    res = run_pipeline(cfg, out, cache_dir=args.cache_dir or os.path.join(out, "cache"))
    print(leaderboard(list(res.reports.values())), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    from .experiment.evaluation import EVAL_MODES
    from .experiment.pipeline import ABLATIONS

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON (defaults apply to missing keys)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out-dir", default="runs/default", help="artifact directory (default: %(default)s)")
    common.add_argument("--shots", type=int, help="override shots per class")
    common.add_argument("--tau", type=float, help="override the retrieval threshold")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="owcod", description="Memory-and-retrieval continual open-vocabulary "
                                "detection at desk scale.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-task", parents=[common], help="generate the synthetic task and write its ground truth")
    sub.add_parser("pretrain", parents=[common], help="train and freeze the base detector")
    t = sub.add_parser("train", parents=[common], help="continual training; writes pool.owmp")
    t.add_argument("--base", help="base checkpoint (default: OUT_DIR/base.owck)")
    t.add_argument("--train-mode", choices=("decoupled", "joint"), help="override the training mode")
    e = sub.add_parser("eval", parents=[common], help="evaluate a pool in one mode")
    e.add_argument("--mode", choices=EVAL_MODES, default="threshold")
    e.add_argument("--base", help="base checkpoint (default: OUT_DIR/base.owck)")
    e.add_argument("--pool", help="memory pool (default: OUT_DIR/pool.owmp)")
    a = sub.add_parser("ablate", parents=[common], help="run one ablation protocol")
    a.add_argument("kind", choices=ABLATIONS)
    a.add_argument("--cache-dir", help="where base checkpoints are cached (default: OUT_DIR/cache)")
    r = sub.add_parser("rank", help="rank evaluation reports against each other")
    r.add_argument("reports", nargs="+", help="report JSON files written by eval/ablate")
    r.add_argument("--out-dir")
    s = sub.add_parser("score", help="AP of COCO-format predictions against COCO-format ground truth")
    s.add_argument("--gt", required=True)
    s.add_argument("--pred", required=True)
    s.add_argument("--out-dir")
    run = sub.add_parser("run", parents=[common], help="pretrain (cached), train and evaluate every mode")
    run.add_argument("--cache-dir", help="where base checkpoints are cached (default: OUT_DIR/cache)")
    return p


COMMANDS = {"gen-task": cmd_gen_task, "pretrain": cmd_pretrain, "train": cmd_train, "eval": cmd_eval,
            "ablate": cmd_ablate, "rank": cmd_rank, "score": cmd_score, "run": cmd_run}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except OwcodError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
