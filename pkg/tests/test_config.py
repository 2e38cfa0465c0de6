import pytest
import yaml

from effconf.config import config_from_dict, dump_config, load_config
from effconf.encoder import PRESETS, get_preset
from effconf.errors import ConfigError


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_dump_load_roundtrip(tmp_path, name):
    path = tmp_path / "cfg.yaml"
    path.write_text(dump_config(PRESETS[name]))
    assert load_config(path) == PRESETS[name]


def test_base_with_stage_override():
    cfg = config_from_dict({"base": "effconf-ctc-s", "stages": [{}, {}, {"dim": 256}]})
    base = get_preset("effconf-ctc-s")
    assert cfg.stages[2].dim == 256
    assert cfg.stages[:2] == base.stages[:2]
    assert cfg.stages[2].heads == base.stages[2].heads


def test_base_with_top_level_override():
    cfg = config_from_dict({"base": "effconf-ctc-s", "output_vocab": 32, "name": "small-vocab"})
    assert cfg.output_vocab == 32 and cfg.name == "small-vocab"
    assert cfg.stages == get_preset("effconf-ctc-s").stages


def test_bare_base_keeps_name():
    assert config_from_dict({"base": "conformer-ctc-m"}) == get_preset("conformer-ctc-m")


@pytest.mark.parametrize("data", [
    {"base": "effconf-ctc-s", "stagez": []},
    {"base": "effconf-ctc-s", "stages": [{}, {"groupsize": 2}, {}]},
    {"arch": "efficient", "stages": [{"blocks": 1, "dim": 8, "heads": 2, "kernel": 3}]},
])
def test_unknown_keys_are_errors(data):
    with pytest.raises(ConfigError, match="unknown key"):
        config_from_dict(data)


@pytest.mark.parametrize("data", [
    {"base": "effconf-ctc-s", "stages": [{}]},
    {"arch": "efficient"},
    {"base": "effconf-ctc-s", "stages": [{}, {}, {"heads": 7}]},
    {"base": "no-such-preset"},
    {"arch": "efficient", "stages": [{"dim": 8}]},
    ["not", "a", "mapping"],
])
def test_invalid_configs(data):
    with pytest.raises(ConfigError):
        config_from_dict(data)


def test_bad_yaml(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("stages: [unterminated")
    with pytest.raises(ConfigError):
        load_config(path)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.yaml")


def test_full_spec_without_base():
    text = """
arch: efficient
input_features: 8
output_vocab: 5
stages:
  - {blocks: 1, dim: 8, heads: 2, conv_kernel: 3, downsample_at_end: true}
  - {blocks: 1, dim: 12, heads: 2, conv_kernel: 3, downsample_at_end: true}
  - {blocks: 1, dim: 16, heads: 2, conv_kernel: 3}
"""
    cfg = config_from_dict(yaml.safe_load(text))
    assert [s.dim for s in cfg.stages] == [8, 12, 16]
