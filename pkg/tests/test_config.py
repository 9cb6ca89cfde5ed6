from pathlib import Path

import pytest

from bev_closure.config import (
    CONFIG_ENV_VAR,
    PipelineConfig,
    from_flat,
    load_config,
    parse_config,
    parse_overrides,
    serialize_config,
)
from bev_closure.errors import ConfigError

SHIPPED_CONFIG = Path(__file__).resolve().parent.parent / "config" / "pipeline.conf"


def test_defaults_without_sources(monkeypatch):
    monkeypatch.delenv(CONFIG_ENV_VAR, raising=False)
    config = load_config()
    assert config.to_flat() == PipelineConfig().to_flat()
    assert config.tau_c == 100.0 and config.nu_b == 0.5 and config.gamma == 5
    assert config.ground.enabled and config.feature.prune


def test_shipped_file_matches_defaults():
    assert load_config(SHIPPED_CONFIG).to_flat() == PipelineConfig().to_flat()


def test_overrides_beat_the_file(tmp_path):
    path = tmp_path / "run.conf"
    path.write_text("tau_c = 50  # 短め\nfeature.prune = false\n")
    config = load_config(path, ["tau_c=25", "ground.enabled = off"])
    assert config.tau_c == 25.0
    assert config.feature.prune is False
    assert config.ground.enabled is False


def test_environment_variable_names_the_file(tmp_path, monkeypatch):
    path = tmp_path / "env.conf"
    path.write_text("gamma = 9\n")
    monkeypatch.setenv(CONFIG_ENV_VAR, str(path))
    assert load_config().gamma == 9


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "absent.conf")


def test_serialized_config_round_trips():
    config = from_flat({"tau_c": 42.5, "feature.max_features": 123, "ground.enabled": False})
    parsed = parse_config(serialize_config(config))
    assert from_flat(parsed).to_flat() == config.to_flat()


def test_comments_and_blank_lines():
    assert parse_config("# 見出し\n\n  seed = 3   # 乱数\n") == {"seed": "3"}


@pytest.mark.parametrize("text, message", [
    ("tau_c 100\n", "expected 'key = value'"),
    ("speed = 3\n", "unknown key 'speed'"),
])
def test_malformed_lines(text, message):
    with pytest.raises(ConfigError, match=message):
        parse_config(text, "run.conf")


def test_bad_overrides():
    with pytest.raises(ConfigError, match="key=value"):
        parse_overrides(["tau_c"])
    with pytest.raises(ConfigError, match="unknown key"):
        parse_overrides(["ground.speed=1"])


@pytest.mark.parametrize("values, message", [
    ({"tau_c": "abc"}, "invalid value for 'tau_c'"),
    ({"feature.prune": "maybe"}, "not a boolean"),
    ({"gamma": "4.5"}, "invalid value for 'gamma'"),
    ({"tau_c": "0"}, "tau_c must be positive"),
    ({"tau_match": "300"}, "tau_match must be within"),
    ({"gamma": "1"}, "gamma must be at least 2"),
    ({"exclude_recent": "-1"}, "exclude_recent"),
    ({"feature.fast_threshold": "256"}, "fast_threshold"),
    ({"ground.cell": "-5"}, "ground.cell must be positive"),
])
def test_invalid_values(values, message):
    with pytest.raises(ConfigError, match=message):
        from_flat(values)
