"""Tests for the experiment configuration layer."""

import json

import pytest

from APP.helpers import config_manager
from APP.helpers.config_manager import (DEFAULT_CONFIG, ExperimentConfig, HyperNetConfig, LossConfig, TrainConfig,
                                        get_value, load_config, load_experiment_config, save_config, set_value)
from APP.helpers.errors import ConfigError


def write(path, data):
    path.write_text(json.dumps(data), encoding="utf-8")
    return str(path)


class TestExperimentConfig:
    def test_defaults_round_trip(self):
        config = ExperimentConfig.from_dict(DEFAULT_CONFIG)
        assert ExperimentConfig.from_dict(config.to_dict()) == config
        assert config.to_dict() == json.loads(json.dumps(DEFAULT_CONFIG))

    def test_partial_document_merges_over_defaults(self):
        config = ExperimentConfig.from_dict({"train": {"steps": 7}, "seed": 3})
        assert config.train.steps == 7
        assert config.train.batch_size == DEFAULT_CONFIG["train"]["batch_size"]
        assert config.seed == 3

    def test_train_loss_follows_loss_section(self):
        config = ExperimentConfig.from_dict({"loss": {"lambda_sim": 0.5}})
        assert config.train.loss is config.loss
        assert config.train.loss.lambda_sim == 0.5

    def test_strict_requires_every_section(self):
        with pytest.raises(ConfigError, match="hypernet"):
            ExperimentConfig.from_dict({k: DEFAULT_CONFIG[k] for k in ("generator", "encoder", "train", "loss")},
                                       strict=True)

    @pytest.mark.parametrize("data", [
        {"bogus": 1},
        {"train": {"bogus": 1}},
        {"train": {"optimizer": "sgd"}},
        {"train": {"learning_rate": 0}},
        {"hypernet": {"head_variant": "dense"}},
        {"hypernet": {"layer_policy": "coarse"}},
        {"hypernet": {"backbone_feature_shape": [4, 4, 32]}},
        {"loss": {"lambda_lpips": -1}},
        {"loss": {"step_reduction": "max"}},
        {"encoder": {"backbone_widths": [8, 8]}},
        {"generator": "not a section"},
    ])
    def test_rejects_invalid(self, data):
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(data)

    def test_hash_is_stable_and_sensitive(self):
        a = ExperimentConfig.from_dict({})
        assert a.config_hash() == ExperimentConfig.from_dict({}).config_hash()
        assert len(a.config_hash()) == 64
        assert a.config_hash() != a.with_seed(1).config_hash()

    def test_with_seed(self):
        config = ExperimentConfig.from_dict({}).with_seed(9)
        assert config.seed == 9 and config.train.seed == 9


class TestSections:
    def test_hypernet_defaults_are_full_scale(self):
        config = HyperNetConfig()
        assert config.backbone_feature_shape == (16, 16, 512)
        assert config.backbone_blocks == (3, 4, 6, 3)

    def test_replace_validates(self):
        with pytest.raises(ConfigError):
            HyperNetConfig().replace(refinement_steps=0)

    def test_loss_presets(self):
        assert LossConfig.preset("faces").lambda_sim == 0.1
        assert LossConfig.preset("generic", lambda_lpips=0.2).lambda_sim == 0.5
        with pytest.raises(ConfigError):
            LossConfig.preset("cars")

    def test_train_accepts_loss_dict(self):
        assert TrainConfig(loss={"lambda_sim": 0.3}).loss.lambda_sim == 0.3


class TestFiles:
    def test_load_missing_explicit_path(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(str(tmp_path / "absent.json"))

    def test_load_invalid_json(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{", encoding="utf-8")
        with pytest.raises(ConfigError):
            load_config(str(path))

    def test_default_file_is_created(self, tmp_path, monkeypatch):
        path = tmp_path / "config.json"
        monkeypatch.setattr(config_manager, "get_config_path", lambda: str(path))
        assert load_config() == DEFAULT_CONFIG
        assert path.exists()

    def test_strict_file(self, tmp_path):
        complete = write(tmp_path / "full.json", DEFAULT_CONFIG)
        assert load_experiment_config(complete, strict=True) == ExperimentConfig.from_dict(DEFAULT_CONFIG)
        partial = write(tmp_path / "partial.json", {"train": {"steps": 1}})
        assert load_experiment_config(partial).train.steps == 1
        with pytest.raises(ConfigError):
            load_experiment_config(partial, strict=True)

    def test_save_and_reload(self, tmp_path):
        config = ExperimentConfig.from_dict({"train": {"steps": 11}})
        path = save_config(config, str(tmp_path / "nested" / "experiment.json"))
        assert load_experiment_config(path) == config


class TestDotPaths:
    def test_get_value(self):
        assert get_value("train.learning_rate", None, DEFAULT_CONFIG) == 0.0001
        assert get_value("train.missing", 5, DEFAULT_CONFIG) == 5
        assert get_value("generator.checkpoint", "none", DEFAULT_CONFIG) == "none"

    def test_set_value_in_memory(self):
        config = {}
        set_value("train.steps", 3, config)
        assert config == {"train": {"steps": 3}}

    def test_set_value_persists(self, tmp_path, monkeypatch):
        path = tmp_path / "config.json"
        monkeypatch.setattr(config_manager, "get_config_path", lambda: str(path))
        set_value("train.steps", 42)
        assert json.loads(path.read_text())["train"]["steps"] == 42
        assert get_value("train.steps") == 42
