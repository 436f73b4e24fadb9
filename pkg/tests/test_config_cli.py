import json
import shutil

import pytest

from cardioscope.cli import main
from cardioscope.config import PipelineConfig, default_config, parse_override
from cardioscope.errors import ConfigError


# ---- configuration

def test_defaults_are_valid():
    cfg = PipelineConfig()
    assert cfg.cae_config().input_size == cfg.preprocess_config().cube_size == 128
    assert cfg.train_config(0).iterations == 100_000
    assert cfg.svm_config().gamma == 1e-4 and cfg.rfc_config(0).n_trees == 75
    assert cfg.data["evaluation"] == {"n_folds": 8, "test_size": 100, "val_size": 50}


@pytest.mark.parametrize("name", ["desk", "tiny"])
def test_builtin_configs_load(name):
    cfg = PipelineConfig.builtin(name)
    assert cfg.test_size is None  # both derive the test size from the partition


@pytest.mark.parametrize("data", [
    {"phantom": {"n_subjects": 10, "colour": "red"}},
    {"nonsense": 1},
    {"training": {"iterations": "many"}},
    {"training": {"iterations": 1.5}},
    {"classifiers": {"grid_search": 1}},
    {"cae": {"input_size": 100}},
    {"preprocess": {"cube_size": 64}},
    {"classifiers": {"kinds": ["SVM", "KNN"]}},
    {"classifiers": {"kinds": []}},
    {"evaluation": {"n_folds": 1}},
    {"evaluation": {"test_size": "half"}},
    {"training": {"loss": "L1"}},
])
def test_invalid_configs_rejected(data):
    with pytest.raises(ConfigError):
        PipelineConfig(data)


def test_config_error_is_value_error():
    assert issubclass(ConfigError, ValueError)


def test_parse_override():
    assert parse_override("training.iterations=500") == {"training": {"iterations": 500}}
    assert parse_override("training.loss=MSE") == {"training": {"loss": "MSE"}}
    assert parse_override("cae.encoder_channels=[1, 2, 3, 4, 5]") == {"cae": {"encoder_channels": [1, 2, 3, 4, 5]}}
    assert parse_override("evaluation.test_size=\"auto\"") == {"evaluation": {"test_size": "auto"}}
    for bad in ("training.iterations", "=3"):
        with pytest.raises(ConfigError):
            parse_override(bad)


def test_grid_tables_accept_new_parameters():
    cfg = PipelineConfig({"classifiers": {"rfc_grid": {"max_depth": [2, 4]}}})
    assert cfg.data["classifiers"]["rfc_grid"]["max_depth"] == [2, 4]


def test_load_file_and_overrides(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("master_seed = 5\n[training]\niterations = 10\n")
    cfg = PipelineConfig.load(p, ["training.iterations=20", "master_seed=6"])
    assert cfg.master_seed == 6 and cfg.train_config(0).iterations == 20
    with pytest.raises(ConfigError):
        PipelineConfig.load(tmp_path / "missing.toml")
    p.write_text("[training\n")
    with pytest.raises(ConfigError):
        PipelineConfig.load(p)
    with pytest.raises(ConfigError):
        PipelineConfig.builtin("nope")


def test_seeds_and_hashes():
    a, b = PipelineConfig(), PipelineConfig({"master_seed": 1})
    assert a.seed("fold", 0, "cae_train") != a.seed("fold", 1, "cae_train")
    assert a.seed("cohort") != b.seed("cohort")
    assert a.section_hash("phantom") != b.section_hash("phantom")
    c = PipelineConfig({"paths": {"work_dir": "/somewhere"}})
    assert a.hash() == c.hash()  # paths do not change results
    assert a.section_hash("training") != PipelineConfig({"training": {"iterations": 3}}).section_hash("training")


def test_resolved_config_roundtrip(tmp_path):
    cfg = PipelineConfig.builtin("tiny", ["paths.work_dir=/x"])
    path = cfg.write_resolved(tmp_path)
    text = path.read_text()
    assert "work_dir" not in text and "master_seed = 7" in text
    assert PipelineConfig.load(path).hash() == cfg.hash()


def test_work_dir_resolution(monkeypatch, tmp_path):
    monkeypatch.delenv("CARDIOSCOPE_WORK_DIR", raising=False)
    with pytest.raises(ConfigError):
        PipelineConfig().work_dir()
    monkeypatch.setenv("CARDIOSCOPE_WORK_DIR", str(tmp_path / "env"))
    assert PipelineConfig().work_dir() == tmp_path / "env"
    assert PipelineConfig({"paths": {"work_dir": "cfg"}}).work_dir().name == "cfg"
    assert PipelineConfig().work_dir(tmp_path / "flag") == tmp_path / "flag"


def test_default_config_is_fresh_copy():
    d = default_config()
    d["classifiers"]["svm_grid"]["gamma"].append(5.0)
    assert 5.0 not in default_config()["classifiers"]["svm_grid"]["gamma"]


# ---- command line

def test_unknown_key_exit_2(tmp_path, capsys):
    err = tmp_path / "err.json"
    code = main(["generate", "-c", "tiny", "-w", str(tmp_path / "w"), "--set", "phantom.colour=1",
                 "--error-json", str(err)])
    assert code == 2
    payload = json.loads(err.read_text())
    assert payload == {"command": "generate", "error": "ConfigError", "exit_code": 2,
                       "message": payload["message"]}
    assert "phantom.colour" in payload["message"]


def test_missing_work_dir_exit_2(monkeypatch, capsys):
    monkeypatch.delenv("CARDIOSCOPE_WORK_DIR", raising=False)
    assert main(["generate", "-c", "tiny", "--error-json", "-"]) == 2
    assert '"exit_code": 2' in capsys.readouterr().err


def test_encode_before_train_cae_exit_3(tiny_run, tmp_path):
    w = tmp_path / "w"
    shutil.copytree(tiny_run, w)
    (w / "folds" / "fold_1" / "cae.pt").unlink()
    err = tmp_path / "e.json"
    assert main(["encode", "-c", "tiny", "-w", str(w), "--fold", "1", "--error-json", str(err)]) == 3
    assert json.loads(err.read_text())["error"] == "MissingUpstreamArtifact"
    # and on an empty workspace
    assert main(["encode", "-c", "tiny", "-w", str(tmp_path / "empty")]) == 3


def test_bad_fold_index_exit_2(tiny_run, tmp_path):
    w = tmp_path / "w"
    shutil.copytree(tiny_run, w)
    assert main(["train-classifiers", "-c", "tiny", "-w", str(w), "--fold", "9"]) == 2


def test_env_work_dir(monkeypatch, tmp_path, capsys):
    monkeypatch.setenv("CARDIOSCOPE_WORK_DIR", str(tmp_path / "envrun"))
    assert main(["generate", "-c", "tiny", "--set", "phantom.n_subjects=4"]) == 0
    assert (tmp_path / "envrun" / "cohort" / "manifest.csv").is_file()
    assert (tmp_path / "envrun" / "resolved_config.toml").is_file()


def test_plot_writes_svgs(tiny_run, tmp_path, capsys):
    w = tmp_path / "w"
    shutil.copytree(tiny_run, w)
    assert main(["train-cae", "-c", "tiny", "-w", str(w), "--fold", "0", "--variant", "FPL"]) == 0
    assert main(["plot", "-c", "tiny", "-w", str(w)]) == 0
    names = sorted(p.name for p in (w / "plots").glob("*.svg"))
    assert names == ["reconstruction_fold0.svg", "roc_NN.svg", "roc_RFC.svg", "roc_SVM.svg", "roc_mean.svg"]
    svg = (w / "plots" / "reconstruction_fold0.svg").read_text()
    assert "FPL reconstruction" in svg and "MSE reconstruction" in svg
    # no date stamp, fixed ids: rerendering gives the same bytes
    first = (w / "plots" / "roc_mean.svg").read_bytes()
    assert main(["plot", "-c", "tiny", "-w", str(w)]) == 0
    assert (w / "plots" / "roc_mean.svg").read_bytes() == first


def test_plot_without_report_exit_3(tmp_path):
    assert main(["plot", "-c", "tiny", "-w", str(tmp_path)]) == 3


def test_stage_by_stage_matches_run_all(tiny_run, tmp_path, capsys):
    w = str(tmp_path / "w")
    for cmd in ("generate", "locate", "preprocess", "train-cae", "encode", "train-classifiers", "evaluate"):
        assert main([cmd, "-c", "tiny", "-w", w]) == 0, cmd
    for name in ("report.json", "auc_per_fold.csv", "roc_mean_SVM.csv"):
        assert (tmp_path / "w" / "report" / name).read_bytes() == (tiny_run / "report" / name).read_bytes()
