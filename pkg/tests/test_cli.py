import json
import math

import pytest
import yaml

from augopf.cli import EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_OK, main
from augopf.config import ConfigError, DEFAULTS, config_digest, load_config
from augopf.nn import load_model

SMALL = {
    "case": "case2_bistable",
    "generate": {
        "profile": {"kind": "sweep", "n": 4, "bus": 2, "q_range": [0.2, 0.5]},
        "k_init": 6,
        "angle_range": math.pi / 2,
        "rule": {"bus": 2},
    },
    "train": {"hidden": [8], "epochs": 5, "batch_size": 4, "learning_rate": 1e-3, "val_fraction": 0.0},
}


def write_config(path, cfg):
    path.write_text(yaml.safe_dump(cfg), encoding="utf-8")
    return str(path)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root / "small.yaml", SMALL)
    assert main(["generate", "--config", cfg, "--out", str(root / "gen")]) == EXIT_OK
    data = str(root / "gen" / "dataset.augds")
    for scheme in ("augmented", "baseline"):
        assert main(["train", "--config", cfg, "--dataset", data, "--scheme", scheme,
                     "--out", str(root / scheme)]) == EXIT_OK
    return root, cfg


def test_config_defaults_and_overrides(tmp_path):
    cfg = load_config()
    assert (cfg["train"]["batch_size"], cfg["train"]["epochs"], cfg["train"]["learning_rate"]) == (50, 4000, 1e-4)
    assert cfg == DEFAULTS
    path = write_config(tmp_path / "c.yaml", {"train": {"epochs": 7}})
    assert load_config(path)["train"]["epochs"] == 7
    assert load_config(path, ["train.epochs=9"])["train"]["epochs"] == 9
    assert load_config(None, ["train.learning_rate=3e-4"])["train"]["learning_rate"] == 3e-4
    assert config_digest(load_config(path)) != config_digest(load_config())


@pytest.mark.parametrize("bad", [["generate.k_init=0"], ["train.nope=1"], ["train.scheme=other"], ["workers=0"],
                                 ["noequals"], ["generate.profile.kind=sweep"]])
def test_config_errors(bad):
    with pytest.raises(ConfigError):
        load_config(None, bad)


def test_unknown_file_key(tmp_path):
    with pytest.raises(ConfigError, match="unknown"):
        load_config(write_config(tmp_path / "c.yaml", {"trian": {}}))
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.yaml")


def test_parse_command(tmp_path, capsys):
    assert main(["parse", "case2_bistable"]) == EXIT_OK
    assert "2 buses, 1 branch" in capsys.readouterr().out
    assert main(["parse", str(tmp_path / "nothing.m")]) == EXIT_DATA
    bad = tmp_path / "bad.m"
    bad.write_text("mpc.baseMVA = 100;\nmpc.bus = [ 1 1 0 0 0 0 1 1 0 230 1 1.1 0.9; ];\n"
                   "mpc.gen = [ ];\nmpc.branch = [ ];\nmpc.gencost = [ ];\n")
    assert main(["parse", str(bad)]) == EXIT_DATA
    assert "invalid case" in capsys.readouterr().err


def test_generate_outputs_and_repeatability(pipeline, tmp_path):
    root, cfg = pipeline
    gen = root / "gen"
    assert main(["generate", "--config", cfg, "--out", str(tmp_path / "again")]) == EXIT_OK
    assert (tmp_path / "again" / "dataset.augds").read_bytes() == (gen / "dataset.augds").read_bytes()
    digests = json.loads((gen / "digests.json").read_text())
    assert digests["counts"]["records"] == 24 and "dataset.augds" in digests["files"]
    assert yaml.safe_load((gen / "config.yaml").read_text())["generate"]["k_init"] == 6


def test_generate_rejects_zero_draws(tmp_path):
    assert main(["generate", "--k-init", "0", "--out", str(tmp_path)]) == EXIT_CONFIG


def test_train_echoes_defaults_and_writes_history(pipeline, capsys, tmp_path):
    root, _ = pipeline
    history = (root / "augmented" / "history.csv").read_text().splitlines()
    assert history[0] == "epoch,train_mse,val_mse" and len(history) == 6
    model = load_model(root / "augmented" / "model.ckpt")
    assert model.info["scheme"] == "augmented"
    assert load_model(root / "baseline" / "model.ckpt").info["scheme"] == "baseline"
    # no config at all: the default hyperparameters are echoed
    data = str(root / "gen" / "dataset.augds")
    code = main(["train", "--dataset", data, "--epochs", "0", "--set", "train.hidden=[4]",
                 "--out", str(tmp_path / "t")])
    assert code == EXIT_OK
    assert "batch 50, epochs 0, lr 0.0001" in capsys.readouterr().out


def test_train_same_seed_same_checkpoint(pipeline, tmp_path):
    root, cfg = pipeline
    assert main(["train", "--config", cfg, "--dataset", str(root / "gen" / "dataset.augds"),
                 "--out", str(tmp_path)]) == EXIT_OK
    assert (tmp_path / "model.ckpt").read_bytes() == (root / "augmented" / "model.ckpt").read_bytes()


def test_train_missing_dataset(tmp_path):
    assert main(["train", "--dataset", str(tmp_path / "none.augds"), "--out", str(tmp_path)]) == EXIT_DATA


def evaluate_config(root, path, **extra):
    cfg = dict(SMALL)
    cols = [{"scheme": s, "dataset": "balanced", "model": str(root / s / "model.ckpt"),
             "test": str(root / s / "test.augds")} for s in ("augmented", "baseline")]
    cfg["evaluate"] = {"columns": cols, **extra}
    return write_config(path, cfg)


def test_evaluate_study_and_audit(pipeline, tmp_path):
    root, _ = pipeline
    cfg = evaluate_config(root, tmp_path / "e.yaml", audit={"dataset": str(root / "gen" / "dataset.augds"),
                                                            "limit": 5})
    for out in ("a", "b"):
        assert main(["evaluate", "--config", cfg, "--no-timing", "--out", str(tmp_path / out)]) == EXIT_OK
    for name in ("metrics.csv", "samples.csv", "table.txt", "audit.json", "digests.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    audit = json.loads((tmp_path / "a" / "audit.json").read_text())
    assert audit["records"] == 5 and audit["certified"] == audit["converged"]
    assert "eta_QD (%)" in (tmp_path / "a" / "table.txt").read_text()


def test_evaluate_missing_model(pipeline, tmp_path):
    root, _ = pipeline
    cfg = evaluate_config(root, tmp_path / "e.yaml")
    text = (tmp_path / "e.yaml").read_text().replace("baseline/model.ckpt", "gone/model.ckpt")
    (tmp_path / "e.yaml").write_text(text)
    assert main(["evaluate", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_DATA
    assert main(["evaluate", "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_solve_modes(pipeline, tmp_path, capsys):
    root, _ = pipeline
    assert main(["solve", "--case", "case39", "--out", str(tmp_path / "s.json")]) == EXIT_OK
    rec = json.loads((tmp_path / "s.json").read_text())
    assert rec["converged"] and rec["kkt_residual"] <= 1e-8 and rec["objective"] > 0

    load = tmp_path / "load.csv"
    load.write_text("bus,pd,qd\n2,343,30\n")
    x0 = tmp_path / "x0.csv"
    # a high-voltage start and a low-voltage one, [pg | qg | vm | va]
    x0.write_text("0.6,2.83,0,0,0.9,0.85,0,-0.3\n0.6,2.83,0,0,0.9,0.45,0,-0.9\n")
    model = str(root / "augmented" / "model.ckpt")
    common = ["solve", "--case", "case2_bistable", "--load", str(load), "--x0", str(x0)]
    assert main(common + ["--mode", "solver"]) == EXIT_OK
    solver = json.loads(capsys.readouterr().out)
    assert main(common + ["--mode", "dnn", "--model", model]) == EXIT_OK
    dnn = json.loads(capsys.readouterr().out)
    assert dnn["mode"] == "dnn" and solver["mode"] == "solver" and solver["objective"] > 0
    assert main(common + ["--mode", "best-of-k", "--model", model]) == EXIT_OK
    best = json.loads(capsys.readouterr().out)
    assert best["k"] == 2 and best["objective"] <= dnn["objective"]
    assert main(common + ["--mode", "dnn"]) == EXIT_CONFIG
    assert main(["solve", "--case", "case2_bistable", "--mode", "dnn", "--model", model]) == EXIT_CONFIG


def test_solve_nonconvergence_exit_code(tmp_path, capsys):
    load = tmp_path / "load.csv"
    load.write_text("bus,pd,qd\n2,900,30\n")
    assert main(["solve", "--case", "case2_bistable", "--load", str(load)]) == EXIT_NUMERIC
    assert json.loads(capsys.readouterr().out)["converged"] is False
