import pytest
import yaml

from geounify.config import (
    DEFAULTS,
    PRESETS,
    from_dict,
    load_config,
    load_yaml,
    preset_config,
    resolve_threads,
    stage_for_level,
    write_snapshot,
)
from geounify.errors import ConfigError


@pytest.fixture
def empty_yaml(tmp_path):
    p = tmp_path / "empty.yaml"
    p.write_text("", encoding="utf-8")
    return p


def test_defaults_are_the_desk_model():
    cfg = from_dict(DEFAULTS)
    assert cfg.tile_size == 96
    assert cfg.model.level_channels == (32, 16, 8)
    assert [cfg.model.level_size(l) for l in range(3)] == [12, 24, 48]
    assert cfg.sigma_px == pytest.approx(4.0)


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_every_preset_validates(name):
    cfg = preset_config(name)
    assert cfg.model.n_levels == len(cfg.model.level_channels)


def test_full_scale_preset_shapes():
    cfg = preset_config("full")
    assert cfg.tile_size == 384
    assert cfg.model.level_size(3) == 96
    assert [stage_for_level(cfg, l) for l in (1, 2, 3)] == [3, 2, 1]
    assert cfg.sigma_px == pytest.approx(16.0)


def test_unknown_preset():
    with pytest.raises(ConfigError, match="unknown preset"):
        preset_config("huge")


def test_file_then_overrides(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("seed: 7\nretrieval:\n  k: 3\n", encoding="utf-8")
    cfg = load_config(str(p), {"retrieval.k": 2, "seed": None})
    assert cfg.seed == 7
    assert cfg.retrieval.k == 2
    assert cfg.source == str(p)


def test_env_selects_the_file(tmp_path, monkeypatch):
    p = tmp_path / "env.yaml"
    p.write_text("seed: 11\n", encoding="utf-8")
    monkeypatch.setenv("GEOUNIFY_CONFIG", str(p))
    assert load_config().seed == 11


def test_preset_sits_under_the_file(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("train:\n  epochs: 3\n", encoding="utf-8")
    cfg = load_config(str(p), preset="tiny")
    assert cfg.tile_size == 32
    assert cfg.train.epochs == 3


def test_unknown_keys_rejected(empty_yaml, tmp_path):
    with pytest.raises(ConfigError, match="unknown config key"):
        load_config(str(empty_yaml), {"retrieval.kk": 3})
    p = tmp_path / "bad.yaml"
    p.write_text("model:\n  widht: 3\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="widht"):
        load_config(str(p))


@pytest.mark.parametrize("key,value,needle", [
    ("retrieval.k", 0, "retrieval.k"),
    ("model.level0_size", 10, "model.level0_size"),
    ("model.level_channels", [32, 12, 8], "model.level_channels"),
    ("train.mode", "sideways", "train.mode"),
    ("fixture.world_size_tiles", 10, "fixture.world_size_tiles"),
    ("loss.label_smoothing", 1.0, "loss.label_smoothing"),
])
def test_invalid_values_name_the_key(empty_yaml, key, value, needle):
    with pytest.raises(ConfigError, match=needle):
        load_config(str(empty_yaml), {key: value})


def test_bad_yaml_is_a_config_error(tmp_path):
    p = tmp_path / "broken.yaml"
    p.write_text("seed: [1, 2\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_yaml(p)
    with pytest.raises(ConfigError, match="not found"):
        load_yaml(tmp_path / "nope.yaml")


def test_threads_env_caps_workers(monkeypatch):
    monkeypatch.setenv("GEOUNIFY_THREADS", "2")
    assert resolve_threads(8) == 2
    assert resolve_threads(1) == 1
    monkeypatch.setenv("GEOUNIFY_THREADS", "many")
    with pytest.raises(ConfigError):
        resolve_threads(4)


def test_snapshot_round_trips(tmp_path):
    cfg = preset_config("tiny", {"seed": 5})
    path = write_snapshot(cfg, tmp_path)
    back = from_dict(yaml.safe_load(path.read_text(encoding="utf-8")))
    assert back == cfg


def test_replace_revalidates():
    cfg = preset_config("tiny")
    assert cfg.replace({"retrieval.k": 2}).retrieval.k == 2
    with pytest.raises(ConfigError):
        cfg.replace({"train.batch_size": 0})
