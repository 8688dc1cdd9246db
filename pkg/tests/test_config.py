"""Tests for experiment configuration loading."""

import pytest

from decoy.config import BUNDLED, ExperimentConfig, bundled_config, from_dict, load_config, resolve_config
from decoy.errors import ConfigError


class TestLoading:
    @pytest.mark.parametrize("name", BUNDLED)
    def test_bundled_configs_load(self, name):
        cfg = bundled_config(name)
        assert cfg.name == name
        assert cfg.format_version == 1

    def test_defaults(self):
        cfg = load_config()
        assert cfg == ExperimentConfig()
        assert cfg.network.layers == [16, 32, 32, 4]

    def test_empty_file_gives_defaults(self, tmp_path):
        path = tmp_path / "empty.yaml"
        path.write_text("")
        assert load_config(path) == ExperimentConfig()

    def test_nested_override(self, tmp_path):
        path = tmp_path / "exp.yaml"
        path.write_text("seed: 3\nattack:\n  budget: 4\ntrials:\n  overhead_probs: [1, 0.5]\n")
        cfg = load_config(path)
        assert cfg.seed == 3
        assert cfg.attack.budget == 4
        assert cfg.attack.stop_acc == 0.35
        assert cfg.trials.overhead_probs == [1.0, 0.5]

    def test_conv_layers(self):
        cfg = from_dict({"network": {"layers": ["1x4x4", "conv:4:3", 4]}, "data": {"dim": 16}})
        assert cfg.network.layers == ["1x4x4", "conv:4:3", 4]

    def test_resolve(self, tmp_path):
        assert resolve_config("code-defense").name == "code-defense"
        path = tmp_path / "mine.yaml"
        path.write_text("name: mine\n")
        assert resolve_config(str(path)).name == "mine"
        assert resolve_config(None) == ExperimentConfig()

    def test_with_overrides(self):
        cfg = ExperimentConfig().with_overrides(seed=42, out="elsewhere")
        assert cfg.seed == 42
        assert cfg.output.dir == "elsewhere"
        assert ExperimentConfig().with_overrides() == ExperimentConfig()


class TestErrors:
    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="attack.bugdet"):
            from_dict({"attack": {"bugdet": 3}})

    def test_wrong_type(self):
        with pytest.raises(ConfigError):
            from_dict({"seed": "seven"})
        with pytest.raises(ConfigError):
            from_dict({"search": {"prune_unreached": 1}})
        with pytest.raises(ConfigError):
            from_dict({"adaptive": {"x1": [1.5]}})

    def test_section_must_be_mapping(self):
        with pytest.raises(ConfigError):
            from_dict({"attack": [1, 2]})

    @pytest.mark.parametrize(
        "data",
        [
            {"obfuscation": {"prob": 1.5}},
            {"obfuscation": {"layer_share": -0.1}},
            {"attack": {"source": 1, "target": 1}},
            {"attack": {"target": 9}},
            {"adaptive": {"mode": "both"}},
            {"format_version": 2},
            {"rotation": {"interval": 0}},
            {"search": {"levels": ["cache"]}},
        ],
    )
    def test_out_of_range(self, data):
        with pytest.raises(ConfigError):
            from_dict(data)

    def test_missing_file(self):
        with pytest.raises(ConfigError):
            resolve_config("no-such-config.yaml")

    def test_bad_yaml(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("seed: [1\n")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_unknown_bundle(self):
        with pytest.raises(ConfigError):
            bundled_config("nope")
