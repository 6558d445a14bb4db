import pytest
import yaml

from lingspot.config import ConfigError, RunConfig, load_config, parse_override
from lingspot.losses import LossWeights


def test_defaults_round_trip(tmp_path):
    cfg = load_config()
    assert cfg == RunConfig()
    cfg.dump(tmp_path / "c.yaml")
    assert load_config(tmp_path / "c.yaml") == cfg


def test_desk_profile_values():
    cfg = load_config()
    sc = cfg.spotter_config(194)
    assert (sc.visual.num_queries, sc.visual.num_points, sc.visual.dim) == (10, 25, 64)
    assert (sc.text.dim, sc.text.max_length) == (128, 32)
    assert sc.weights.text == 6.0 and sc.weights.dec_coord == 1.0
    assert (sc.match.cls, sc.match.points) == (2.0, 0.05)
    # the loss-weight type itself keeps unit class weights
    assert LossWeights().enc_cls == LossWeights().dec_cls == 1.0


def test_precedence_flags_over_file(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump({"seed": 3, "plm": {"epochs": 7, "lr": 0.01}}))
    cfg = load_config(path, ["plm.epochs=2"])
    assert cfg.seed == 3
    assert cfg.plm.epochs == 2
    assert cfg.plm.lr == 0.01
    assert cfg.plm.dim == 128  # untouched default


def test_nested_weights_override():
    cfg = load_config(None, ["spotter.weights.text=15"])
    assert cfg.spotter.weights.text == 15
    assert isinstance(cfg.spotter.weights, LossWeights)


@pytest.mark.parametrize("override", ["bogus=1", "plm.bogus=1", "spotter.weights.lambda=2"])
def test_unknown_keys_rejected(override):
    with pytest.raises(ConfigError, match="unknown"):
        load_config(None, [override])


def test_unknown_key_in_file(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("visual:\n  dims: 3\n")
    with pytest.raises(ConfigError, match="visual.dims"):
        load_config(path)


def test_bad_inputs(tmp_path):
    with pytest.raises(ConfigError):
        parse_override("no-equals-sign")
    with pytest.raises(ConfigError):
        parse_override("a..b=1")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("- just\n- a list\n")
    with pytest.raises(ConfigError):
        load_config(bad)
    with pytest.raises(ConfigError):
        load_config(None, ["spotter.weights.text=-1"])


def test_override_values_parse_as_yaml():
    assert parse_override("a.b=[1, 2]") == {"a": {"b": [1, 2]}}
    assert parse_override("x=none") == {"x": "none"}
    assert parse_override("x=") == {"x": None}


def test_scalar_types_checked():
    assert load_config(None, ["spotter.lr=1e30"]).spotter.lr == 1e30
    assert load_config(None, ["plm.lr=1"]).plm.lr == 1.0
    assert load_config(None, ["visual.ffn_inner=null"]).visual.ffn_inner is None
    for bad in ["plm.epochs=2.5", "plm.lr=fast", "scenes.degraded=3", "scenes.blur=0.5", "spotter.steps=true"]:
        with pytest.raises(ConfigError):
            load_config(None, [bad])
