import json
import os

import pytest

from owcod.cli import main
from owcod.errors import ConfigError, DataError, FormatError
from owcod.experiment.access import DataAccess, LeakageError
from owcod.experiment.checkpoint import dumps_base, loads_base
from owcod.experiment.config import ExperimentConfig
from owcod.experiment.pipeline import RunManifest, obtain_base, run_ablation, run_pipeline
from owcod.experiment.pretrain import make_task
from owcod.memory.pool import load_pool

from tiny import TINY, tiny_config


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    cfg = tiny_config()
    res = run_pipeline(cfg, str(root / "run"), cache_dir=str(root / "cache"))
    return cfg, root, res


# ---------------------------------------------------------------- config


def test_config_json_round_trip():
    cfg = tiny_config()
    assert ExperimentConfig.from_dict(json.loads(cfg.to_json())) == cfg


@pytest.mark.parametrize("bad", [
    {"seed": -1},
    {"bogus": 1},
    {"schedule": {"mode": "sideways"}},
    {"schedule": {"lr": 0.0}},
    {"schedule": {"batch_size": 2}},
    {"retrieval": {"nope": 1}},
    {"detector": {"vocab": ["a"]}},
    {"pretrain": {"ap_floor": 2.0}},
])
def test_config_rejects_invalid(bad):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(bad)


def test_config_load_errors(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        ExperimentConfig.load(p)
    with pytest.raises(ConfigError):
        ExperimentConfig.load(tmp_path / "missing.json")


def test_overrides():
    cfg = tiny_config().with_overrides(seed=9, tau=0.5, shots=3, mode="joint")
    assert (cfg.seed, cfg.retrieval.tau, cfg.task.shots, cfg.schedule.mode) == (9, 0.5, 3, "joint")


# ---------------------------------------------------------------- checkpoint


def test_checkpoint_round_trip(tiny_run):
    cfg, root, _ = tiny_run
    det, _ = obtain_base(cfg, make_task(cfg), cache_dir=str(root / "cache"))
    data = dumps_base(det, {"note": 1})
    back, meta = loads_base(data)
    assert meta == {"note": 1}
    assert back.params.fingerprint() == det.params.fingerprint()
    assert dumps_base(back, meta) == data
    assert not any(back.params[n].requires_grad for n in back.params.names())


def test_checkpoint_corruption_rejected(tiny_run):
    cfg, root, _ = tiny_run
    det, _ = obtain_base(cfg, make_task(cfg), cache_dir=str(root / "cache"))
    data = dumps_base(det)
    flipped = bytearray(data)
    flipped[len(data) // 2] ^= 0x01
    for bad in (b"XXXX" + data[4:], data[:4] + b"\x09" + data[5:], bytes(flipped), data[:-7], data[:3]):
        with pytest.raises(FormatError):
            loads_base(bad)


def test_base_cache_hit(tiny_run):
    cfg, root, _ = tiny_run
    _, info = obtain_base(cfg, make_task(cfg), cache_dir=str(root / "cache"))
    assert info["cached"]


# ---------------------------------------------------------------- access accounting


def test_eval_reads_during_training_raise():
    task = make_task(tiny_config())
    access = DataAccess(task)
    with access.phase("train"):
        access.train("subset01")
        with pytest.raises(LeakageError):
            access.eval("subset01")
    with access.phase("pretrain"):
        with pytest.raises(LeakageError):
            access.eval("pretrain")
    with pytest.raises(DataError):
        access.train("nowhere")


def test_pipeline_never_reads_eval_while_training(tiny_run):
    _, _, res = tiny_run
    log = res.access.log
    assert not [e for e in log if e[0] in ("train", "pretrain") and e[2] == "eval"]
    trained = {e[1] for e in log if e[0] == "train"}
    assert trained == {"subset01", "subset02"}


# ---------------------------------------------------------------- pipeline artifacts


def test_pipeline_artifacts(tiny_run):
    cfg, root, res = tiny_run
    run = root / "run"
    for rel in ("pool.owmp", "train_log.json", "manifest.json", "reports/summary.csv", "reports/leaderboard.txt",
                "reports/threshold.json", "predictions/threshold/unseen.json"):
        assert (run / rel).exists(), rel
    assert RunManifest.verify(str(run)) == []
    pool = load_pool(str(run / "pool.owmp"))
    assert [tr.step for tr in pool.triplets] == [1, 2]
    logs = json.loads((run / "train_log.json").read_text())
    assert [l["step"] for l in logs] == [1, 2]
    assert all(l["after_step_ap"] is not None for l in logs)
    assert set(res.reports) == {"threshold", "oracle", "zero-shot", "no-retrieval-last-triplet"}


def test_manifest_detects_tampering(tiny_run, tmp_path):
    _, root, _ = tiny_run
    import shutil

    copy = tmp_path / "run"
    shutil.copytree(root / "run", copy)
    with open(copy / "reports" / "threshold.json", "a") as f:
        f.write(" ")
    assert RunManifest.verify(str(copy)) == ["reports/threshold.json"]


def test_zero_shot_falls_back_everywhere(tiny_run):
    _, _, res = tiny_run
    assert res.reports["zero-shot"].fallback_rate == {"seen": 1.0, "unseen": 1.0}


# ---------------------------------------------------------------- CLI


def _write_cfg(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(TINY))
    return str(p)


def test_cli_exit_codes(tmp_path, capsys):
    cfg = _write_cfg(tmp_path)
    out = str(tmp_path / "out")
    assert main(["gen-task", "--config", cfg, "--out-dir", out]) == 0
    assert os.path.exists(os.path.join(out, "gt", "subset01-eval.json"))
    # missing base -> data error
    assert main(["train", "--config", cfg, "--out-dir", out]) == 3
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"schedule": {"mode": "x"}}))
    assert main(["gen-task", "--config", str(bad), "--out-dir", out]) == 2
    assert main(["eval", "--config", cfg, "--out-dir", out, "--mode", "zero-shot"]) == 3
    assert "error:" in capsys.readouterr().err


def test_cli_pretrain_train_eval(tmp_path, capsys):
    cfg = _write_cfg(tmp_path)
    out = str(tmp_path / "out")
    assert main(["pretrain", "--config", cfg, "--out-dir", out]) == 0
    assert main(["train", "--config", cfg, "--out-dir", out]) == 0
    for mode in ("threshold", "zero-shot"):
        assert main(["eval", "--config", cfg, "--out-dir", out, "--mode", mode]) == 0
    assert "fallback rate" in capsys.readouterr().out
    reports = [os.path.join(out, "reports", f"eval-{m}.json") for m in ("threshold", "zero-shot")]
    assert main(["rank", *reports]) == 0
    with open(os.path.join(out, "pool.owmp"), "r+b") as f:
        f.seek(20)
        b = f.read(1)
        f.seek(20)
        f.write(bytes([b[0] ^ 0xFF]))
    assert main(["eval", "--config", cfg, "--out-dir", out]) == 3


def test_cli_score(tmp_path, capsys):
    cfg = _write_cfg(tmp_path)
    out = str(tmp_path / "out")
    assert main(["gen-task", "--config", cfg, "--out-dir", out]) == 0
    gt = os.path.join(out, "gt", "subset01-eval.json")
    doc = json.load(open(gt))
    preds = [{"image_id": a["image_id"], "category_id": a["category_id"], "bbox": a["bbox"], "score": 1.0}
             for a in doc["annotations"]]
    pp = tmp_path / "pred.json"
    pp.write_text(json.dumps(preds))
    capsys.readouterr()
    assert main(["score", "--gt", gt, "--pred", str(pp)]) == 0
    assert json.loads(capsys.readouterr().out)["AP"] == pytest.approx(1.0)


def test_cli_rank_rejects_duplicates(tiny_run):
    _, root, _ = tiny_run
    p = str(root / "run" / "reports" / "threshold.json")
    assert main(["rank", p, p]) == 3


def test_cli_seed_override_changes_task(tmp_path):
    cfg = _write_cfg(tmp_path)
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    assert main(["gen-task", "--config", cfg, "--out-dir", a]) == 0
    assert main(["gen-task", "--config", cfg, "--out-dir", b, "--seed", "6"]) == 0
    da = json.load(open(os.path.join(a, "task.json")))["digest"]
    db = json.load(open(os.path.join(b, "task.json")))["digest"]
    assert da != db


# ---------------------------------------------------------------- ablations


@pytest.mark.parametrize("kind,methods", [
    ("components", ["zero-shot", "+concept", "+concept+retrieval", "+concept+interaction", "full"]),
    ("layers", ["layers=0", "layers=1", "layers=2"]),
    ("joint", ["decoupled", "joint"]),
    ("oracle", ["threshold", "oracle"]),
    ("shots", ["zero-shot", "shots=1", "shots=3", "shots=5", "shots=10"]),
])
def test_ablation_protocols(kind, methods, tiny_run, tmp_path):
    cfg, root, _ = tiny_run
    reports = run_ablation(kind, cfg, str(tmp_path), cache_dir=str(root / "cache"))
    assert [r.method for r in reports] == methods
    assert all(r.ranks for r in reports)
    assert (tmp_path / "reports" / f"{kind}-leaderboard.txt").exists()
    if kind == "layers":
        per_step = [r.added_params["per_step"] for r in reports]
        assert len({b - a for a, b in zip(per_step, per_step[1:])}) == 1
