import json

import pytest

from deskrecon.config.settings import RUN_CONFIG_NAME, RunConfig, ValidationError, parse_overrides


def test_defaults(config):
    assert RunConfig(_env_file=None).reducer == "dot_sum"
    assert config.truncation == pytest.approx(0.3)
    k = config.intrinsics()
    assert (k.width, k.height, k.fx) == (64, 48, 48.0)
    assert config.channel_config() is not None


def test_environment_overrides(config, monkeypatch):
    monkeypatch.setenv("DESKRECON_N_PLANES", "12")
    monkeypatch.setenv("DESKRECON_EXTRACTOR", "patch")
    cfg = RunConfig(_env_file=None)
    assert cfg.n_planes == 12
    assert cfg.extractor == "patch"


def test_unknown_keys_are_rejected(config):
    with pytest.raises(ValidationError):
        RunConfig(_env_file=None, n_plane=12)


@pytest.mark.parametrize(
    "values",
    [
        {"d_min": 3.0, "d_max": 2.0},
        {"t_min": 0.5, "t_max": 0.4},
        {"patch_size": 6},
        {"cx": 100.0},
        {"crop_size": 64},
        {"n_sources": 9},
        {"reducer": "max"},
    ],
)
def test_invalid_values(config, values):
    with pytest.raises(ValidationError):
        RunConfig(_env_file=None, **values)


def test_save_and_load_round_trip(config, tmp_path):
    path = config.save(tmp_path)
    assert path.name == RUN_CONFIG_NAME
    stored = json.loads(path.read_text())
    assert stored["n_frames"] == 24
    reloaded = RunConfig.load(path)
    assert reloaded == config


def test_overrides_beat_the_file(config, tmp_path):
    path = config.save(tmp_path)
    reloaded = RunConfig.load(path, {"n_planes": 40, "motion": "line"})
    assert reloaded.n_planes == 40
    assert reloaded.motion == "line"
    assert reloaded.n_frames == 24


def test_parse_overrides():
    assert parse_overrides(["n_planes=32", "motion=line", "room_extents=[4, 3, 4]", "lr=1e-3"]) == {
        "n_planes": 32,
        "motion": "line",
        "room_extents": [4, 3, 4],
        "lr": 0.001,
    }
    with pytest.raises(ValueError):
        parse_overrides(["n_planes"])


def test_derived_configs(config):
    scene = config.scene_config()
    assert scene.seed == config.seed
    assert scene.room_extents == (5.0, 3.0, 5.0)
    train = config.train_config(steps=7)
    assert train.steps == 7
    assert train.n_planes == config.n_planes
    assert train.ordering == config.source_ordering
