import json
import math

import pytest

from modules.config import (
    OUTPUT_DIR_ENV,
    RunConfig,
    apply_overrides,
    config_hash,
    load_config,
    parse_override,
    to_dict,
)
from modules.errors import ConfigError


@pytest.fixture(autouse=True)
def _no_env_output_dir(monkeypatch):
    monkeypatch.delenv(OUTPUT_DIR_ENV, raising=False)


def test_defaults():
    cfg = load_config()
    assert cfg == RunConfig()
    assert cfg.planner.mode == "pinhole"
    assert cfg.lattice.n_bins == 64
    assert cfg.output_dir == "runs/default"


def test_planner_config_mapping():
    cfg = load_config(overrides=["planner.half_angle_deg=30", "seed=5", "camera.fov_deg=90"])
    p = cfg.planner_config()
    assert p.half_angle == pytest.approx(math.radians(30.0))
    assert p.fov == pytest.approx(math.pi / 2.0)
    assert p.rng_seed == 5
    assert p.max_range == cfg.map.max_range


@pytest.mark.parametrize("text, expected", [
    ("planner.lambda1=2.5", (["planner", "lambda1"], 2.5)),
    ("scene.preset=two_rooms", (["scene", "preset"], "two_rooms")),
    ("eval.prefixes=[5,10]", (["eval", "prefixes"], [5, 10])),
    ("budget.max_seconds=null", (["budget", "max_seconds"], None)),
    ("seed=3", (["seed"], 3)),
])
def test_parse_override(text, expected):
    assert parse_override(text) == expected


@pytest.mark.parametrize("text", ["planner.lambda1", "=3"])
def test_malformed_override(text):
    with pytest.raises(ConfigError):
        parse_override(text)


def test_overrides_leave_the_input_alone():
    data = {"planner": {"lambda1": 1.0}}
    merged = apply_overrides(data, ["planner.lambda2=0.5", "map.workers=2"])
    assert merged == {"planner": {"lambda1": 1.0, "lambda2": 0.5}, "map": {"workers": 2}}
    assert data == {"planner": {"lambda1": 1.0}}


@pytest.mark.parametrize("override", [
    "planner.temperature=1",
    "colour.depth=8",
    "budget.max_views=abc",
    "budget.max_views=2.5",
    "planner.lambda1=true",
    "planner=3",
])
def test_bad_values_rejected(override):
    with pytest.raises(ConfigError):
        load_config(overrides=[override])


@pytest.mark.parametrize("override", [
    "budget.max_views=0",
    "lattice.n_bins=3",
    "camera.fov_deg=180",
    "planner.half_angle_deg=95",
    "eval.prefixes=[0]",
    "map.workers=0",
])
def test_out_of_range_values_rejected(override):
    with pytest.raises(ConfigError):
        load_config(overrides=[override])


def test_bad_planner_mode_is_reported_as_planner_error():
    with pytest.raises(ConfigError, match="^planner: "):
        load_config(overrides=["planner.mode=greedy"])


def test_file_then_overrides(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"scene": {"preset": "two_rooms"}, "budget": {"max_views": 7}}))
    cfg = load_config(str(path), ["budget.max_views=9"])
    assert cfg.scene.preset == "two_rooms"
    assert cfg.budget.max_views == 9


def test_invalid_json(tmp_path):
    path = tmp_path / "run.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(str(path))


def test_top_level_must_be_an_object(tmp_path):
    path = tmp_path / "run.json"
    path.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_config(str(path))


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "absent.json"))


def test_environment_sets_the_output_dir(monkeypatch, tmp_path):
    monkeypatch.setenv(OUTPUT_DIR_ENV, str(tmp_path))
    assert load_config().output_dir == str(tmp_path)


def test_hash_ignores_the_output_dir():
    a = load_config()
    b = load_config(overrides=["output_dir=elsewhere"])
    assert b.output_dir == "elsewhere"
    assert config_hash(a) == config_hash(b)
    assert len(config_hash(a)) == 12
    assert config_hash(load_config(overrides=["seed=1"])) != config_hash(a)


def test_to_dict_is_json_serializable():
    data = to_dict(load_config())
    assert json.loads(json.dumps(data)) == data
