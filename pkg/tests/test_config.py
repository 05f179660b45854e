import pytest

from capsdistill.config import RunConfig, config_from_dict, load_config
from capsdistill.errors import ConfigError
from capsdistill.signal import SEED_BANDS, SEED_VIG_BANDS

EXAMPLE = """
output_dir: runs/example
data:
  synth: {n_subjects: 4, n_sessions: 15, segments_per_session: 2, n_channels: 3}
features: {bands: seed, segment_seconds: 8}
teacher: {n_layers: 1, hidden_units: 25}
student: {n_layers: 1, hidden_units: 16}
distill: {eta: 0.3, xi: 1000.0, alpha: 0.7}
plan: {epochs: 3, seed: 7, subjects: [0, 1], lr: {base: 0.002}}
sweep: {ladder: [[1, 25], [1, 16]], fractions: [0.5], teacher_epochs: 2}
"""


def test_load_yaml(tmp_path):
    (tmp_path / "c.yaml").write_text(EXAMPLE)
    cfg = load_config(tmp_path / "c.yaml")
    assert cfg.data.synth.n_channels == 3 and cfg.plan.subjects == (0, 1)
    assert cfg.sweep.ladder == ((1, 25), (1, 16))
    plan = cfg.to_plan("classification")
    assert plan.n_epochs == 3 and plan.seed == 7 and plan.lr(1) == 0.002
    assert plan.distill.alpha == 0.7 and plan.teacher == {"n_layers": 1, "hidden_units": 25}


def test_json_is_accepted(tmp_path):
    (tmp_path / "c.json").write_text('{"plan": {"seed": 3}}')
    assert load_config(tmp_path / "c.json").plan.seed == 3


@pytest.mark.parametrize("raw, where", [({"bogus": 1}, "config"), ({"plan": {"epoch": 3}}, "plan"),
                                        ({"data": {"synth": {"chans": 3}}}, "data.synth"),
                                        ({"plan": {"lr": {"rate": 1}}}, "plan.lr"),
                                        ({"student": {"units": 16}}, "student")])
def test_unknown_keys_rejected(raw, where):
    with pytest.raises(ConfigError, match=where):
        config_from_dict(raw)


def test_invalid_values_rejected():
    with pytest.raises(ConfigError):
        config_from_dict({"distill": {"alpha": 2.0}}).to_plan("classification")
    with pytest.raises(ConfigError):
        config_from_dict({"plan": "fast"})
    with pytest.raises(ConfigError):
        config_from_dict({"features": {"bands": "ultra"}}).features.to_spec()


def test_bad_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    (tmp_path / "bad.yaml").write_text("plan: [unclosed")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.yaml")


def test_band_defaults_follow_task():
    f = RunConfig().features
    assert f.to_spec("classification").bands == SEED_BANDS
    assert f.to_spec("regression").bands == SEED_VIG_BANDS
    assert config_from_dict({"features": {"bands": [[1, 4], [4, 8]]}}).features.to_spec().bands == ((1.0, 4.0), (4.0, 8.0))


def test_dict_round_trip():
    cfg = config_from_dict({"plan": {"seed": 5, "subjects": [2]}, "data": {"synth": {"n_channels": 4}}})
    again = config_from_dict(cfg.to_dict())
    assert again.to_dict() == cfg.to_dict()


def test_output_env_root(monkeypatch, tmp_path):
    monkeypatch.setenv("CAPSDISTILL_OUTPUT", str(tmp_path))
    assert RunConfig(output_dir="runs/a").output_path() == tmp_path / "runs/a"
    assert RunConfig(output_dir="/abs/b").output_path().as_posix() == "/abs/b"
