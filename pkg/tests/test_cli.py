import json

import jsonschema
import numpy as np
import pytest

from wifiloc import cli, pipeline
from wifiloc.evaluation import METRICS_SCHEMA
from wifiloc.nn import read_checkpoint

TINY = """
seed = 3

[data]
scans_per_point = 4
known_scans = 2
unknown_scans = 1

[wifinet]
widths = [2, 3, 4, 5, 6]

[train]
epochs = 1
minibatch = 16

[svm]
epochs = 3

[subknn]
m = 3

[bench]
ap_counts = [40]
position_counts = [30]
scans_per_point = [2]
n_calls = 20
"""


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "tiny.toml"
    p.write_text(TINY)
    return p


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def last_json(text):
    return json.loads(text.strip().splitlines()[-1])


def test_generate_files_and_determinism(tmp_path, cfg_path, capsys):
    for name in ("a", "b"):
        code, out, _ = run(capsys, "generate", "--config", cfg_path, "--out", tmp_path / name)
        assert code == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert files == ["environment.json", "test_known.csv", "test_trajectory.csv", "test_unknown.csv", "train.csv"]
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    run(capsys, "generate", "--config", cfg_path, "--out", tmp_path / "c", "--seed", 4)
    assert (tmp_path / "c" / "train.csv").read_bytes() != (tmp_path / "a" / "train.csv").read_bytes()


def test_missing_environment_file_is_validation_error(tmp_path, capsys):
    p = tmp_path / "bad.toml"
    p.write_text('environment = "nowhere.toml"\n')
    code, _, err = run(capsys, "generate", "--config", p, "--out", tmp_path / "o")
    assert code == cli.EXIT_USAGE
    assert last_json(err)["error"] == "ConfigError"


def test_environment_file_reference(tmp_path, capsys):
    (tmp_path / "env.toml").write_text("[environment]\nn_aps = 20\nn_unknown = 5\n")
    (tmp_path / "c.toml").write_text('environment = "env.toml"\n[data]\nscans_per_point = 1\nknown_scans = 1\n')
    cfg = pipeline.load_config(tmp_path / "c.toml")
    assert cfg.environment.n_aps == 20 and cfg.environment.n_unknown == 5


def test_config_rejects_unknown_keys(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("[train]\nlearning_rte = 0.1\n")
    with pytest.raises(pipeline.ConfigError, match="learning_rte"):
        pipeline.load_config(p)
    with pytest.raises(pipeline.ConfigError):
        pipeline.load_config(tmp_path / "absent.toml")


def test_flags_override_config(cfg_path, tmp_path):
    cfg = pipeline.load_config(cfg_path, seed=11, out=str(tmp_path), model="knn")
    assert (cfg.seed, cfg.out, cfg.model) == (11, str(tmp_path), "knn")
    assert cfg.data.scans_per_point == 4 and cfg.wifinet.widths == (2, 3, 4, 5, 6)


def test_unknown_model(tmp_path, cfg_path, capsys):
    run(capsys, "generate", "--config", cfg_path, "--out", tmp_path)
    code, _, err = run(capsys, "train", "--config", cfg_path, "--out", tmp_path, "--model", "resnet")
    assert code != 0 and "resnet" in last_json(err)["message"]


def test_train_knn_stores_training_matrix(tmp_path, cfg_path, capsys):
    run(capsys, "generate", "--config", cfg_path, "--out", tmp_path)
    code, out, _ = run(capsys, "train", "--config", cfg_path, "--out", tmp_path, "--model", "knn")
    assert code == 0
    header, arrays = read_checkpoint(last_json(out)["checkpoint"])
    # raw dBm features by default: one column per AP of the 113-AP directory
    assert header["model"] == "knn" and arrays["x"].shape == (120, 113)


def test_train_wifinet_then_eval(tmp_path, cfg_path, capsys):
    run(capsys, "generate", "--config", cfg_path, "--out", tmp_path)
    curves = []
    for name in ("r1", "r2"):
        code, out, _ = run(capsys, "train", "--config", cfg_path, "--data", tmp_path, "--out", tmp_path / name,
                           "--model", "wifinet", "--epochs", 2)
        assert code == 0
        curves.append((tmp_path / name / "wifinet.loss.csv").read_text())
    assert curves[0] == curves[1] and len(curves[0].splitlines()) == 3
    code, out, _ = run(capsys, "eval", "--config", cfg_path, "--out", tmp_path / "ev",
                       "--checkpoint", tmp_path / "r1" / "wifinet.ckpt",
                       "--testset", tmp_path / "test_unknown.csv", "--kind", "test-unknown")
    assert code == 0
    metrics = json.loads((tmp_path / "ev" / "wifinet.unknown.metrics.json").read_text())
    jsonschema.validate(metrics, METRICS_SCHEMA)
    assert metrics["accuracy"] is None and metrics["n_samples"] == 67


def test_eval_oracle_mode(tmp_path, cfg_path, capsys):
    run(capsys, "generate", "--config", cfg_path, "--out", tmp_path)
    code, out, _ = run(capsys, "eval", "--config", cfg_path, "--out", tmp_path / "ev", "--oracle",
                       "--testset", tmp_path / "test_known.csv", "--kind", "test-known")
    assert code == 0
    m = last_json(out)["metrics"]
    assert m["accuracy"] == 1.0 and m["rmse_m"] == 0.0


def test_eval_missing_checkpoint(tmp_path, cfg_path, capsys):
    run(capsys, "generate", "--config", cfg_path, "--out", tmp_path)
    code, _, err = run(capsys, "eval", "--config", cfg_path, "--out", tmp_path, "--checkpoint",
                       tmp_path / "none.ckpt", "--testset", tmp_path / "test_known.csv", "--kind", "test-known")
    assert code == cli.EXIT_FAILURE and last_json(err)["error"] == "FileNotFoundError"


def test_eval_rejects_foreign_testset(tmp_path, cfg_path, capsys):
    run(capsys, "generate", "--config", cfg_path, "--out", tmp_path)
    run(capsys, "train", "--config", cfg_path, "--out", tmp_path, "--model", "knn")
    foreign = tmp_path / "foreign.csv"
    foreign.write_text("timestamp,position_id,x,y,readings\n1,,1.0,1.0,ZZ:-50\n")
    code, _, err = run(capsys, "eval", "--config", cfg_path, "--out", tmp_path, "--checkpoint",
                       tmp_path / "knn.ckpt", "--testset", foreign, "--kind", "test-unknown")
    assert code != 0 and "access points" in last_json(err)["message"]


def test_bench_one_cell(tmp_path, cfg_path, capsys):
    code, out, _ = run(capsys, "bench", "--config", cfg_path, "--out", tmp_path)
    assert code == 0
    lines = (tmp_path / "bench.csv").read_text().splitlines()
    assert "realtime_250ms" in lines[0].split(",")
    names = [row.split(",")[0] for row in lines[1:]]
    assert names == sorted(names) == ["knn", "subknn", "svm", "wifinet"]


def test_repro_twelve_rows_and_deterministic(tmp_path, cfg_path, capsys):
    for name in ("a", "b"):
        code, out, _ = run(capsys, "repro", "--config", cfg_path, "--out", tmp_path / name, "--no-bench")
        assert code == 0 and last_json(out)["rows"] == 12
    for f in ("summary.csv", "summary.md", "config.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    rows = (tmp_path / "a" / "summary.csv").read_text().splitlines()
    assert len(rows) == 13
    for model in pipeline.PREDICTORS:
        a = pipeline.load_predictor(tmp_path / "a" / "models" / f"{model}.ckpt")
        b = pipeline.load_predictor(tmp_path / "b" / "models" / f"{model}.ckpt")
        q = np.random.default_rng(0).integers(0, 171, size=(10, a.directory.side, a.directory.side))
        assert np.array_equal(a.predict_batch(q), b.predict_batch(q))


def test_plain_output_switch(monkeypatch):
    monkeypatch.setenv("NO_COLOR", "1")
    assert cli.plain_output()


def test_shipped_configs_load():
    from pathlib import Path
    import dataclasses

    root = Path(__file__).resolve().parents[1] / "configs"
    default = pipeline.load_config(root / "default.toml")
    assert default.to_dict() == dataclasses.replace(pipeline.ExperimentConfig(), out="runs/default").to_dict()
    assert pipeline.load_config(root / "quick.toml").train.epochs == 2
