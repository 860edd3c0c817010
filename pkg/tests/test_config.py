import copy

import pytest
import yaml

from sparsecbct.config import DEFAULTS, ConfigError, config_hash, dump_config, load_config, sparse_views
from pathlib import Path

REPO = Path(__file__).resolve().parents[1]


def write(tmp_path, body, name="c.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(body))
    return p


def test_no_file_gives_defaults():
    cfg = load_config()
    assert cfg == DEFAULTS
    assert sparse_views(cfg) == 23 and cfg["dense"]["views"] == 180 and cfg["fusion"]["omega"] == 0.8


def test_shipped_default_file_matches_defaults():
    assert load_config(REPO / "configs" / "default.yaml") == DEFAULTS


def test_partial_file_merges_nested(tmp_path):
    cfg = load_config(write(tmp_path, {"geometry": {"sdd": 1600.0}, "sparse": {"protocol": "50"}}))
    assert cfg["geometry"]["sdd"] == 1600.0 and cfg["geometry"]["sod"] == 1000.0
    assert sparse_views(cfg) == 50


@pytest.mark.parametrize(
    "body,match",
    [
        ({"bogus": 1}, "unknown config key 'bogus'"),
        ({"naf": {"lr": 1}}, "naf.lr"),
        ({"geometry": 3}, "mapping"),
        ({"sparse": {"protocol": "23", "views": 50}}, "fixes"),
        ({"sparse": {"protocol": "custom"}}, "required"),
        ({"sparse": {"protocol": "17"}}, "protocol"),
        ({"sparse": {"protocol": "custom", "views": 1}}, "at least 2"),
        ({"dense": {"views": 20}}, "dense.views"),
        ({"fusion": {"omega": 1.5}}, "omega"),
        ({"geometry": {"sdd": 900.0}}, "sod"),
        ({"phantom": {"kind": "volume"}}, "phantom.path"),
        ({"phantom": {"kind": "volume", "path": "nowhere"}}, "does not exist"),
        ({"fdk": {"filter": "shepp"}}, "fdk.filter"),
        ({"diffusion": {"dr": {"steps": 0}}}, "diffusion.dr.steps"),
    ],
)
def test_invalid_configs(tmp_path, body, match):
    with pytest.raises(ConfigError, match=match):
        load_config(write(tmp_path, body))


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "none.yaml")
    (tmp_path / "bad.yaml").write_text("a: [1, 2\n")
    with pytest.raises(ConfigError, match="parse"):
        load_config(tmp_path / "bad.yaml")
    (tmp_path / "list.yaml").write_text("- 1\n")
    with pytest.raises(ConfigError, match="mapping"):
        load_config(tmp_path / "list.yaml")


def test_hash_ignores_output_only():
    a = copy.deepcopy(DEFAULTS)
    b = copy.deepcopy(DEFAULTS)
    b["output"] = "elsewhere"
    assert config_hash(a) == config_hash(b)
    b["seed"] = 1
    assert config_hash(a) != config_hash(b)
    c = copy.deepcopy(DEFAULTS)
    c["diffusion"]["dr"]["lr"] = 2e-3
    assert config_hash(a) != config_hash(c)
    assert len(config_hash(a)) == 64


def test_dump_round_trip(tmp_path):
    p = tmp_path / "d.yaml"
    p.write_text(dump_config(DEFAULTS))
    assert load_config(p) == DEFAULTS
