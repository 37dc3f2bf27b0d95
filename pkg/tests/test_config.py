import pytest

from snncvt.config import ARMS, ConfigError, PipelineConfig, config_from_dict, dump_config, load_config


def test_defaults_are_valid():
    cfg = config_from_dict({})
    assert cfg.T == 4 and cfg.stage2.cc and cfg.stage2.fc and cfg.arm() == "stage1+stage2"


def test_six_arms_expressible():
    cfg = PipelineConfig()
    assert len(ARMS) == 6
    for arm in ARMS:
        assert cfg.with_arm(arm).arm() == arm


def test_stage2_defaults_by_task():
    cfg = PipelineConfig()
    assert (cfg.stage2_config("recognition").loss, cfg.stage2_config("recognition").lr) == ("kl", 5e-4)
    assert (cfg.stage2_config("regression").loss, cfg.stage2_config("regression").lr) == ("mse", 1e-4)


@pytest.mark.parametrize("raw, path", [
    ({"stage1": {"T": 0}}, "stage1.T"),
    ({"stage1": {"T": "four"}}, "stage1.T"),
    ({"stage1": {"p": 2.0}}, "stage1.p"),
    ({"model": {"colour": 1}}, "model.colour"),
    ({"data": {"n_calib": -1}}, "data.n_calib"),
    ({"data": {"seed": 3}}, "data.seed"),
    ({"stage2": {"loss": "l1"}}, "stage2.loss"),
    ({"eval": {"T_list": [4, 0]}}, "eval.T_list[1]"),
    ({"bogus": 1}, "bogus"),
])
def test_errors_name_the_field(raw, path):
    with pytest.raises(ConfigError) as info:
        config_from_dict(raw)
    assert info.value.path == path


def test_file_roundtrip_and_relative_paths(tmp_path):
    cfg = config_from_dict({"seed": 3, "data": {"source": "idx", "images": "a.idx", "labels": "b.idx"},
                            "eval": {"T_list": [2, 4]}}, str(tmp_path))
    (tmp_path / "c.toml").write_text(dump_config(cfg))
    back = load_config(tmp_path / "c.toml")
    assert back == cfg
    assert back.data.images == str(tmp_path / "a.idx") and back.data.seed == 3
    assert back.time_steps() == [2, 4]


def test_missing_and_malformed_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "none.toml")
    (tmp_path / "bad.toml").write_text("seed = = 1\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.toml")
