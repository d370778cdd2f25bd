from __future__ import annotations

import csv
import io
import json
import re

import numpy as np
import pytest

from compzsl.compspace import default_split
from compzsl.evalkit import ConfusionMatrix, Detection, save_detections
from compzsl.expcli import (
    DEFAULT_SEEDS,
    CliError,
    ExperimentConfig,
    cmd_confusions,
    cmd_eval,
    cmd_gen,
    cmd_report,
    cmd_train,
    config_hash,
    main,
)
from compzsl.scenegen import load_dataset
from compzsl.tokenmodel import read_checkpoint_header

SMALL = ["datasets.pretrain.shots=2", "datasets.test.shots=1", "train.epochs=3", "model.d=16",
         "increment.epochs=2", "datasets.increment.shots=1"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data, runs = root / "data", root / "runs"
    args = ["--data-dir", str(data), "--out-dir", str(runs)] + [a for s in SMALL for a in ("--set", s)]
    assert main(["gen", *args]) == 0
    return root, data, runs, args


def _only_run(runs):
    return sorted(p.parent for p in runs.glob("*/run.json"))


def test_config_defaults_and_overrides(tmp_path):
    cfg = ExperimentConfig.load()
    assert cfg.doc["datasets"]["pretrain"]["shots"] == 10 and cfg.doc["datasets"]["test"]["shots"] == 60
    assert list(DEFAULT_SEEDS) == list(range(13))
    cfg = ExperimentConfig.load(overrides=["train.epochs=7", "components.separation=false"])
    assert cfg.train_config(1).epochs == 7 and cfg.train_config(1).loss.weights.lambda1 == 0
    with pytest.raises(CliError, match="unknown config key"):
        ExperimentConfig.load(overrides=["train.nope=1"])
    with pytest.raises(CliError):
        ExperimentConfig.load(tmp_path / "missing.json")
    with pytest.raises(CliError, match="manifest"):
        ExperimentConfig.load(overrides=[f"manifest={tmp_path / 'no.json'}"])


def test_config_hash_is_order_independent():
    assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})


def test_ablation_grid_is_distinct():
    hashes, losses = set(), set()
    for bits in range(8):
        s, p, d = (bool(bits & 4), bool(bits & 2), bool(bits & 1))
        cfg = ExperimentConfig.load(overrides=[f"components.smoothing={json.dumps(s)}",
                                               f"components.separation={json.dumps(p)}",
                                               f"components.decorrelation={json.dumps(d)}"])
        hashes.add(config_hash(cfg.run_doc(0)))
        losses.add(json.dumps(cfg.train_config(0).loss.to_dict(), sort_keys=True))
    assert len(hashes) == len(losses) == 8


def test_gen_counts(workspace):
    _, data, _, _ = workspace
    pre, test = load_dataset(data / "pretrain"), load_dataset(data / "test")
    assert pre.n_instances == 6 * 2 and test.n_instances == 18 * 1
    assert (data / "manifest.json").is_file()


def test_gen_missing_manifest_fails(tmp_path, capsys):
    assert main(["gen", "--data-dir", str(tmp_path), "--manifest", str(tmp_path / "nope.json")]) == 1
    err = json.loads(capsys.readouterr().err)
    assert err["verb"] == "gen" and "manifest" in err["message"]


def test_train_writes_stamped_run(workspace):
    _, data, runs, args = workspace
    assert main(["train", *args, "--baseline-csp", "--seed", "0"]) == 0
    (run,) = _only_run(runs)
    rec = json.loads((run / "run.json").read_text())
    chash, seed = rec["config_hash"], rec["seed"]
    assert run.name == chash and seed == 0
    assert rec["components"] == {"smoothing": False, "separation": False, "decorrelation": False}
    cfg = json.loads((run / "config.json").read_text())
    assert cfg["config_hash"] == chash
    stored = {k: v for k, v in cfg.items() if k not in ("config_hash",)}
    assert config_hash(stored) == chash
    assert json.loads((run / "report.json").read_text())["config_hash"] == chash
    assert (run / "confusion.csv").read_text().startswith(f"# config_hash={chash} seed=0")
    assert all(json.loads(ln)["config_hash"] == chash for ln in (run / "log.jsonl").read_text().splitlines())
    assert read_checkpoint_header(run / "checkpoint.bin")["meta"] == {"config_hash": chash, "seed": 0}
    # rerunning without --force refuses
    assert main(["train", *args, "--baseline-csp", "--seed", "0"]) == 1


def test_train_is_byte_reproducible(workspace, tmp_path):
    _, data, _, _ = workspace
    outs = []
    for name in ("a", "b"):
        cfg = ExperimentConfig.load(overrides=SMALL)
        cfg.set("data_dir", str(data))
        cfg.set("out_dir", str(tmp_path / name))
        (run,) = cmd_train(cfg, [5])
        outs.append(run)
    for f in ("checkpoint.bin", "report.json", "confusion.csv", "log.jsonl", "config.json"):
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes(), f


def test_eval_checkpoint_matches_training_report(workspace):
    _, data, runs, _ = workspace
    run = _only_run(runs)[0]
    report = cmd_eval(run / "checkpoint.bin", data / "test")
    stored = json.loads((run / "report.json").read_text())["report"]
    assert report.to_dict() == stored


def test_eval_synthetic_detections(workspace, tmp_path, capsys):
    _, data, _, _ = workspace
    ds = load_dataset(data / "test")
    perfect = [Detection(i, tuple(float(v) for v in b), c, 1.0) for i, anns in ds.ground_truth().items()
               for b, c in anns]
    save_detections(perfect, tmp_path / "perfect.json")
    save_detections([], tmp_path / "empty.json")
    assert main(["eval", "--dataset", str(data / "test"), "--detections", str(tmp_path / "perfect.json"),
                 "--out", str(tmp_path / "r.json")]) == 0
    doc = json.loads((tmp_path / "r.json").read_text())
    assert doc["mAP"]["seen"] == doc["mAP"]["unseen"] == doc["hm"] == 100.0
    assert json.loads(capsys.readouterr().out) == doc
    rep = cmd_eval(None, data / "test", detections=tmp_path / "empty.json")
    assert rep.mAP["overall"] == 0.0 and rep.hm == 0.0
    with pytest.raises(CliError):
        cmd_eval(None, data / "test")


def _fake_confusions(run, cells):
    split = default_split()
    space = split.space
    m = np.eye(18, 19, dtype=np.int64) * 10
    for (j, k), v in cells.items():
        jid, kid = space.parse(j), space.parse(k)
        m[jid, jid], m[jid, kid] = 10 - v, v
    ConfusionMatrix(m, space.names(range(18))).write(run / "confusion.csv", comment="test")


def test_confusions_plans(workspace, tmp_path, capsys):
    _, _, runs, _ = workspace
    run = _only_run(runs)[0]
    original = (run / "confusion.csv").read_text()
    try:
        _fake_confusions(run, {("green cylinder", "green cube"): 4})
        plan = json.loads(cmd_confusions(run, out=tmp_path / "p.json").read_text())
        assert plan["pairs"][0]["underperformer"] == "green cylinder"
        assert plan["prompts"] == {"green cylinder": "is not green cube but is green cylinder"}
        assert sorted(plan["increment"]) == ["green cube", "green cylinder"]
        assert plan["config_hash"] == run.name
        empty = json.loads(cmd_confusions(run, threshold=1.01, out=tmp_path / "e.json").read_text())
        assert empty["pairs"] == []
        _fake_confusions(run, {})
        assert main(["confusions", "--run", str(run), "--out", str(tmp_path / "i.json")]) == 0
        assert "warning" in capsys.readouterr().err
    finally:
        (run / "confusion.csv").write_text(original)


def test_increment_and_report(workspace, tmp_path):
    _, data, runs, _ = workspace
    run = _only_run(runs)[0]
    original = (run / "confusion.csv").read_text()
    _fake_confusions(run, {("green cylinder", "green cube"): 4, ("red sphere", "red cube"): 5})
    try:
        assert main(["confusions", "--run", str(run), "--out", str(tmp_path / "plan.json")]) == 0
    finally:
        (run / "confusion.csv").write_text(original)
    inc_out = tmp_path / "inc"
    for regime in ("prompt", "all-tokens"):
        assert main(["increment", "--run", str(run), "--plan", str(tmp_path / "plan.json"), "--regime", regime,
                     "--out-dir", str(inc_out)]) == 0
    assert main(["increment", "--run", str(run), "--plan", str(tmp_path / "plan.json"), "--epochs", "0",
                 "--out-dir", str(tmp_path / "zero")]) == 0
    (zero,) = _only_run(tmp_path / "zero")
    deltas = json.loads((zero / "report.json").read_text())["deltas"]["delta"]
    assert all(v in (0.0, None) for v in deltas.values())
    inc_runs = _only_run(inc_out)
    assert len(inc_runs) == 2
    kinds = {json.loads((r / "run.json").read_text())["regime"] for r in inc_runs}
    assert kinds == {"prompt_only", "all_tokens"}
    assert any(p.name.startswith("increment-") for p in data.iterdir())

    text, table = cmd_report([runs, inc_out])
    rows = list(csv.DictReader(io.StringIO(table)))
    assert {r["table"] for r in rows} == {"ablation", "increment"}
    assert {r["metric"] for r in rows if r["table"] == "ablation"} == {"seen", "unseen", "hm"}
    for r in rows:
        if r["mean"] != "-":
            assert r["mean"] in text and len(r["mean"].split(".")[1]) == 1
    deltas = [ln for ln in text.splitlines() if "_delta" in ln]
    assert deltas and all(re.search(r"_delta\s+-?\d+\.\d [\^v=]\s", ln) for ln in deltas)


def test_report_single_run_and_mixed_manifests(workspace, tmp_path):
    _, _, runs, _ = workspace
    run = _only_run(runs)[0]
    text, table = cmd_report([run])
    assert len(list(csv.DictReader(io.StringIO(table)))) == 3
    other = tmp_path / "other"
    other.mkdir()
    rec = json.loads((run / "run.json").read_text())
    rec["manifest"]["splits"]["pretrain"] = rec["manifest"]["splits"]["pretrain"][:-1]
    (other / "run.json").write_text(json.dumps(rec))
    (other / "report.json").write_text((run / "report.json").read_text())
    with pytest.raises(CliError, match="manifests"):
        cmd_report([run, other])


def test_multi_seed_report_has_std(workspace, tmp_path):
    _, data, _, _ = workspace
    cfg = ExperimentConfig.load(overrides=SMALL)
    cfg.set("data_dir", str(data))
    cfg.set("out_dir", str(tmp_path))
    cmd_train(cfg, [0, 1])
    _, table = cmd_report([tmp_path])
    rows = list(csv.DictReader(io.StringIO(table)))
    assert all(r["n"] == "2" for r in rows)


def test_verbose_flag_either_side(workspace, capsys):
    _, data, _, _ = workspace
    assert main(["-v", "eval", "--dataset", str(data / "test")]) == 1
    assert main(["eval", "-v", "--dataset", str(data / "test")]) == 1
    err = capsys.readouterr().err
    assert '"verb": "eval"' in err


def test_gen_defaults_count_exactly(tmp_path):
    cfg = ExperimentConfig.load(overrides=["datasets.test.shots=2"])
    cfg.set("data_dir", str(tmp_path))
    out = cmd_gen(cfg)
    assert out["pretrain"]["instances"] == 60 and out["test"]["instances"] == 36
