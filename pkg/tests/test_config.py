import json

import pytest

from encscan.config import ConfigError, ToolConfig, config_from_dict, dump_config, load_config
from encscan.data import PatchTrigger


def test_defaults_apply_to_absent_keys():
    cfg = config_from_dict({"scan": {"tau": 0.05}})
    assert cfg.scan.tau == 0.05
    assert cfg.scan.beta == -0.99
    assert cfg.pretrain == ToolConfig().pretrain
    assert load_config(None) == ToolConfig()


@pytest.mark.parametrize("doc, key", [
    ({"bogus": {}}, "bogus"),
    ({"scan": {"taux": 1}}, "scan.taux"),
    ({"attack": {"trigger": {"colour": [1, 1, 1]}}}, "attack.trigger.colour"),
])
def test_unknown_keys_are_named(doc, key):
    with pytest.raises(ConfigError, match=key.replace(".", r"\.")):
        config_from_dict(doc)


def test_type_errors_are_named():
    with pytest.raises(ConfigError, match="harness.n_clean"):
        config_from_dict({"harness": {"n_clean": "ten"}})
    with pytest.raises(ConfigError, match="scan"):
        config_from_dict({"scan": {"beta": -2.0}})


def test_yaml_and_json_files(tmp_path):
    cfg = config_from_dict({"attack": {"trigger": {"height": 5, "fill": "random"}, "alpha": 0.5}})
    (tmp_path / "c.yaml").write_text(dump_config(cfg))
    (tmp_path / "c.json").write_text(json.dumps(cfg.to_dict()))
    assert load_config(tmp_path / "c.yaml") == cfg
    assert load_config(tmp_path / "c.json") == cfg
    assert cfg.attack.trigger == PatchTrigger(5, 10, fill="random")
    (tmp_path / "bad.yaml").write_text("scan: [unclosed")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.yaml")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")


def test_overrides_win_and_skip_none():
    cfg = ToolConfig().override(scan={"tau": 0.2, "beta": None})
    assert cfg.scan.tau == 0.2 and cfg.scan.beta == -0.99
