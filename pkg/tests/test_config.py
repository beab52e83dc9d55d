import pytest

from pcmr.config import PipelineConfig, load_config, parse_config_file


def test_defaults_carry_paper_constants():
    cfg = PipelineConfig()
    assert cfg.lambda_rot == 0.01
    assert cfg.lambda_smooth == 0.001
    assert cfg.learning_rate == 1e-4
    assert cfg.context == 30
    assert cfg.fps == 30
    assert cfg.dropout_skr == 0.3
    assert cfg.dropout_smrm == 0.2
    assert cfg.dropout_skin == 0.2


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\nseed=7\nlambda_rot=0.5\nout_dir=results\ncondition_every_step=false\n")
    cfg = load_config(path)
    assert cfg.seed == 7
    assert cfg.lambda_rot == 0.5
    assert cfg.out_dir == "results"
    assert cfg.condition_every_step is False
    cfg2 = load_config(path, overrides={"seed": "9"})
    assert cfg2.seed == 9


def test_env_overrides_paths_only(tmp_path, monkeypatch):
    monkeypatch.setenv("PCMR_OUT_DIR", "/tmp/elsewhere")
    monkeypatch.setenv("PCMR_SEED", "1234")  # not a path: ignored
    cfg = load_config()
    assert cfg.out_dir == "/tmp/elsewhere"
    assert cfg.seed == 0


def test_invalid_values_rejected(tmp_path):
    with pytest.raises(ValueError):
        load_config(None, {"lambda_rot": "-1"})
    with pytest.raises(ValueError):
        load_config(None, {"context": "1"})
    with pytest.raises(ValueError):
        load_config(None, {"procrustes": "banana"})
    with pytest.raises(ValueError):
        load_config(None, {"skin_feature_mode": "polar"})
    with pytest.raises(ValueError):
        load_config(None, {"no_such_key": "1"})
    bad = tmp_path / "bad.cfg"
    bad.write_text("just a line\n")
    with pytest.raises(ValueError, match="key=value"):
        parse_config_file(bad)


def test_trunk_parsing():
    cfg = PipelineConfig(skr_trunk="8,16,32")
    assert cfg.ints("skr_trunk") == (8, 16, 32)
