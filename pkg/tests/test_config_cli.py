import json
import os

import numpy as np
import pytest

from mrsae.cli import main
from mrsae.config import ConfigError, ExperimentConfig, dump_config, from_mapping, load_config, parse_override
from mrsae.data import EmbeddingMatrix, load_covariates, load_embeddings, load_ground_truth, write_embeddings

from conftest import CONFIGS

TINY = {
    "synth_n_subjects": 240, "synth_d": 12, "synth_n_nuisance": 2, "synth_scans_max": 2,
    "synth_factors": ["age", "disease", "sex"], "k": 4, "expansion": 2, "epochs": 3, "batch_size": 64,
    "k_nn": 5, "top_n": 4, "lam": 0.1,
}


def _config(tmp_path, **extra):
    cfg = from_mapping({**TINY, **extra, "out": str(tmp_path / "run")})
    path = str(tmp_path / "c.toml")
    dump_config(cfg, path)
    return path


def _run(cmd, path, *flags):
    return main([cmd, "--config", path, *flags])


# -- config ----------------------------------------------------------------------------


def test_round_trip(tmp_path):
    cfg = ExperimentConfig()
    dump_config(cfg, str(tmp_path / "a.toml"))
    back = load_config(str(tmp_path / "a.toml"))
    assert back == cfg
    assert dump_config(back) == dump_config(cfg)


@pytest.mark.parametrize("name", ["synthetic.toml", "deconfound.toml"])
def test_shipped_configs_validate(name):
    cfg = load_config(os.path.join(CONFIGS, name)).validate()
    assert load_config(os.path.join(CONFIGS, name)) == cfg


def test_hash_ignores_paths_and_threads():
    a = ExperimentConfig()
    assert a.hash() == a.with_overrides({"out": "elsewhere", "threads": 8}).hash()
    assert a.hash() != a.with_overrides({"lam": 1.0}).hash()


def test_override_parsing():
    assert parse_override("lam=0.5") == ("lam", 0.5)
    assert parse_override("out=runs/x") == ("out", "runs/x")
    cfg = from_mapping(dict([parse_override("grid_lams=[0, 1]"), parse_override("ablation=true")]))
    assert cfg.grid_lams == (0, 1) and cfg.ablation is True


def test_bad_values():
    with pytest.raises(ConfigError):
        from_mapping({"nope": 1})
    with pytest.raises(ConfigError):
        from_mapping({"k": "many"})
    with pytest.raises(ConfigError):
        from_mapping({"lam": -1.0}).validate()
    with pytest.raises(ConfigError):
        from_mapping({"synth_confounds": ["age-diagnosis"]}).confounds()


def test_nested_table_rejected(tmp_path):
    p = tmp_path / "n.toml"
    p.write_text("[train]\nk = 3\n")
    with pytest.raises(ConfigError, match="flat"):
        load_config(str(p))


# -- commands ----------------------------------------------------------------------------


def test_synth_files_reloadable_and_identical(tmp_path):
    path = _config(tmp_path)
    assert _run("synth", path) == 0
    out = tmp_path / "run"
    first = {n: (out / n).read_bytes() for n in os.listdir(out)}
    emb = load_embeddings(str(out / "embeddings.csv"))
    cov = load_covariates(str(out / "covariates.csv"))
    gt = load_ground_truth(str(out / "ground_truth.json"))
    assert emb.sample_ids == cov.sample_id and gt.true_dictionary.shape == (12, 5)
    assert _run("synth", path) == 0
    assert first == {n: (out / n).read_bytes() for n in os.listdir(out)}


def test_synth_cyclic_confounds_exit_2(tmp_path, capsys):
    path = _config(tmp_path, synth_confounds=["age->disease:0.3", "disease->age:0.3"])
    assert _run("synth", path) == 2
    assert "cycle" in capsys.readouterr().err


def test_missing_artifact_exit_3(tmp_path, capsys):
    path = _config(tmp_path)
    assert _run("train", path) == 3
    assert "embeddings" in capsys.readouterr().err
    assert _run("synth", path) == 0
    assert _run("annotate", path) == 3
    assert "checkpoint" in capsys.readouterr().err
    assert main(["train", "--config", str(tmp_path / "absent.toml")]) == 3


def test_invalid_lambda_exit_2(tmp_path):
    path = _config(tmp_path)
    assert _run("train", path, "--set", "lam=-1") == 2


def test_pipeline_and_standard_sae_tag(tmp_path):
    path = _config(tmp_path)
    out = tmp_path / "run"
    for cmd in ("synth", "graph", "train", "annotate", "evaluate", "replicate", "diagnose", "report"):
        assert _run(cmd, path) == 0, cmd
    prov = json.loads((out / "train_report.json").read_text())
    assert prov["variant"] == "manifold-regularized SAE"
    assert prov["provenance"]["config_hash"] == load_config(path).hash()
    for name in ("annotations.csv", "predictions.csv", "heatmap.csv", "graph.bin"):
        assert (out / name).exists()
    assert (out / "predictions.csv").read_text().startswith("# {")
    assert _run("train", path, "--set", "lam=0") == 0
    assert json.loads((out / "train_report.json").read_text())["variant"] == "standard SAE"


def test_evaluate_without_converters_exit_2(tmp_path):
    path = _config(tmp_path)
    assert _run("synth", path) == 0
    out = tmp_path / "run"
    lines = (out / "covariates.csv").read_text().splitlines()
    header = lines[1].split(",")
    j = header.index("converter")
    keep = [",".join(c for i, c in enumerate(row.split(",")) if i != j) for row in lines[1:]]
    (out / "covariates.csv").write_text("\n".join(keep) + "\n")
    assert _run("train", path) == 0
    assert _run("evaluate", path) == 2


def test_divergence_exit_4(tmp_path):
    path = _config(tmp_path)
    assert _run("synth", path) == 0
    emb_path = str(tmp_path / "run" / "embeddings.csv")
    emb = load_embeddings(emb_path)
    write_embeddings(EmbeddingMatrix(emb.values * 1e200, emb.sample_ids), emb_path)
    assert _run("train", path, "--set", "lam=0") == 4


def test_threads_flag_does_not_change_outputs(tmp_path):
    path = _config(tmp_path)
    out = tmp_path / "run"
    assert _run("synth", path) == 0
    assert _run("graph", path, "--threads", "1") == 0
    a = (out / "graph.bin").read_bytes()
    assert _run("graph", path, "--threads", "3") == 0
    assert (out / "graph.bin").read_bytes() == a
    np.testing.assert_array_equal(np.frombuffer(a, dtype=np.uint8), np.frombuffer((out / "graph.bin").read_bytes(), dtype=np.uint8))
