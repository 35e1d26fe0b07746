import csv
import json

import numpy as np
import pytest

from tpkd import cli, nn, training
from tpkd.config import ConfigError, apply_overrides, default_dict, load_config

TINY = ["epochs=2", 'data.samples_per_class={"train": 12, "val": 8, "test": 8}',
        "teacher1.width=[4,4,4]", "teacher2.width=[4,4,4]", "student.width=[2,4,4]",
        "teacher1.blocks_per_stage=1", "teacher2.blocks_per_stage=1", "data.length=48",
        "pi.resolution=6", "bench_samples=6", "analyze_batch=16"]


def tiny_cfg(tmp_path, *extra):
    return load_config(None, TINY + list(extra), env={"TPKD_OUT": str(tmp_path / "out")})


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("run")
    cfg = tiny_cfg(tmp)
    cli.cmd_gen_data(cfg)
    cli.cmd_extract_pi(cfg)
    for role in cli.ROLES:
        cli.cmd_train(cfg, role)
    return cfg


def test_overrides_and_validation():
    d = apply_overrides(default_dict(), ["distill.beta=1.5", "out_dir=x"])
    assert d["distill"]["beta"] == 1.5 and d["out_dir"] == "x"
    with pytest.raises(ConfigError, match="unknown key"):
        apply_overrides(default_dict(), ["distill.nope=1"])
    with pytest.raises(ConfigError):
        load_config(None, ["data.classes=1"], env={})
    with pytest.raises(ConfigError, match="seeds"):
        load_config(None, ["seeds=[]"], env={})
    with pytest.raises(ConfigError, match="no stage 4"):
        load_config(None, ["distill.layer_pairs=[[1,1,4]]"], env={})


def test_env_overrides_output_dir(tmp_path):
    cfg = load_config(None, ["out_dir=elsewhere"], env={"TPKD_OUT": str(tmp_path)})
    assert cfg.out_dir == tmp_path


def test_gen_data_deterministic_and_creates_dir(tmp_path):
    a = tiny_cfg(tmp_path / "a")
    b = tiny_cfg(tmp_path / "b")
    pa, pb = cli.cmd_gen_data(a), cli.cmd_gen_data(b)
    for s in pa:
        assert cli.file_hash(pa[s]) == cli.file_hash(pb[s])


def test_extract_pi_alignment_and_empty(tmp_path, capsys):
    cfg = tiny_cfg(tmp_path, 'data.samples_per_class={"train": 3, "val": 0, "test": 2}')
    ser = cli.cmd_gen_data(cfg)
    pis = cli.cmd_extract_pi(cfg)
    from tpkd.data import load_dataset
    for s in ser:
        a, b = load_dataset(ser[s]), load_dataset(pis[s])
        np.testing.assert_array_equal(a.y, b.y)
        assert len(a) == len(b)
    assert len(load_dataset(pis["val"])) == 0
    h = {s: cli.file_hash(p) for s, p in pis.items()}
    cli.cmd_extract_pi(cfg)
    assert "extract-pi: up to date" in capsys.readouterr().out
    cli.cmd_extract_pi(cfg, force=True)
    assert h == {s: cli.file_hash(p) for s, p in pis.items()}
    manifest = json.loads((cfg.out_dir / "manifest.json").read_text())
    assert "extraction_seconds" in manifest["phases"]["extract-pi"]


def test_missing_prerequisite_named(tmp_path):
    cfg = tiny_cfg(tmp_path)
    with pytest.raises(cli.MissingArtifactError, match="train dataset"):
        cli.cmd_train(cfg, "teacher1")
    cli.cmd_gen_data(cfg)
    with pytest.raises(cli.MissingArtifactError, match="teacher1 checkpoint"):
        cli.cmd_train(cfg, "student-kd")


def test_roles_produce_artifacts(pipeline):
    cfg = pipeline
    run = cli.Run(cfg)
    for role in cli.ROLES:
        assert run.ckpt(0, role).exists() and run.ckpt(0, role, "final").exists()
        with open(run.role_dir(0, role) / "history.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == cfg.epochs
        assert tuple(rows[0]) == training.HISTORY_COLUMNS
    manifest = json.loads((cfg.out_dir / "manifest.json").read_text())
    for role in cli.ROLES:
        entry = manifest["phases"][f"train/seed0/{role}"]
        for rel, digest in entry["outputs"].items():
            assert cli.file_hash(cfg.out_dir / rel) == digest


def test_annealed_student_starts_from_scratch_final(pipeline):
    run = cli.Run(pipeline)
    _, scratch_state, _ = nn.load_state(run.ckpt(0, "scratch", "final"))
    dcfg, _ = cli.role_distill_config(pipeline, "student-ann")
    m = training.anneal_init(pipeline.student, run.ckpt(0, "scratch", "final"))
    assert nn.state_hash(m.state_dict()) == nn.state_hash(scratch_state)
    assert dcfg.anneal and not dcfg.uses_features


def test_role_configs(pipeline):
    kd, mode = cli.role_distill_config(pipeline, "student-kd")
    assert mode == "kd" and not kd.anneal
    no, _ = cli.role_distill_config(pipeline, "student-tpkd-noorth")
    assert no.feature_loss == "mse" and no.beta == pipeline.beta_noorth
    full, _ = cli.role_distill_config(pipeline, "student-tpkd")
    assert full.feature_loss == "orth" and full.uses_features


def test_retrain_is_up_to_date(pipeline, capsys):
    cli.cmd_train(pipeline, "student-tpkd")
    assert "up to date" in capsys.readouterr().out


def test_changing_beta_only_invalidates_feature_students(pipeline, capsys):
    cfg = load_config(None, TINY + ["distill.beta=0.5"], env={"TPKD_OUT": str(pipeline.out_dir)})
    run = cli.Run(cfg)
    ins = [run.data_path("train")]
    stale = {role for role in cli.ROLES
             if run.manifest.phases[f"train/seed0/{role}"]["config_hash"]
             != run.manifest._hash_for(f"train/seed0/{role}")}
    assert stale == {"student-tpkd"}
    assert not run.manifest.up_to_date("train/seed0/student-tpkd", ins)


def test_eval_clean_matches_level_zero_and_bad_path(pipeline, tmp_path):
    rep = cli.cmd_eval(pipeline, "student-tpkd", 0, 0)
    again = cli.cmd_eval(pipeline, "student-tpkd", 0, 0,
                         checkpoint=cli.Run(pipeline).ckpt(0, "student-tpkd"))
    assert rep == again
    assert 0 <= rep.accuracy <= 1 and sum(map(sum, rep.confusion)) == 32
    cli.cmd_eval(pipeline, "teacher2", 0, 2)
    with pytest.raises(cli.MissingArtifactError):
        cli.cmd_eval(pipeline, "student-tpkd", 0, 0, checkpoint=tmp_path / "nope.ckpt")


def test_corruption_is_seeded(pipeline):
    a = cli.cmd_eval(pipeline, "scratch", 0, 3, force=True)
    b = cli.cmd_eval(pipeline, "scratch", 0, 3, force=True)
    assert a == b


def test_bench_and_analyze(pipeline):
    rows = cli.cmd_bench(pipeline)
    names = [r["model"] for r in rows]
    assert names == ["teacher1", "teacher2_pi_only", "teacher2_model_only",
                     "teacher2_pipeline", "student"]
    assert all(r["samples"] == 6 and r["mean_ms"] > 0 for r in rows)
    out = cli.cmd_analyze(pipeline)
    with open(out["cka"]) as fh:
        cka = list(csv.DictReader(fh))
    self_rows = [r for r in cka if r["model_a"] == r["model_b"] and r["layer_a"] == r["layer_b"]]
    assert self_rows and all(float(r["cka"]) == pytest.approx(1.0) for r in self_rows)
    with open(out["pearson"]) as fh:
        assert len(list(csv.DictReader(fh))) == 5 * 3 * 20


def test_bench_zero_samples(pipeline, tmp_path):
    cfg = load_config(None, TINY + ["bench_samples=0"], env={"TPKD_OUT": str(pipeline.out_dir)})
    assert cli.cmd_bench(cfg) == []
    assert (pipeline.out_dir / "bench.csv").read_text().strip() == ",".join(cli.BENCH_COLUMNS)


def test_main_exit_codes(tmp_path, capsys):
    out = str(tmp_path / "o")
    assert cli.main(["gen-data", "--out", out, "--set", "data.classes=1"]) == 2
    assert cli.main(["train", "--role", "teacher1", "--out", out]) == 3
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    assert cli.main(["gen-data", "--config", str(bad)]) == 2
    args = ["--out", out] + sum((["--set", s] for s in TINY), [])
    assert cli.main(["gen-data", *args]) == 0
    assert "config error" in capsys.readouterr().err


def test_divergence_exit_code(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise training.DivergenceError(3, float("nan"))

    monkeypatch.setattr(training, "train_teacher", boom)
    args = ["--out", str(tmp_path)] + sum((["--set", s] for s in TINY), [])
    assert cli.main(["gen-data", *args]) == 0
    assert cli.main(["train", "--role", "teacher1", *args]) == 4
