"""Experiment config document: validation, round trips, stable hashing."""

from __future__ import annotations

import dataclasses

import pytest

from taskfuse.config import (ConfigError, DataConfig, ExperimentConfig, JigsawConfig,
                             RegularizerConfig, TteConfig, config_from_dict, config_hash,
                             config_to_dict, load_config, run_dir_name, save_config)


class TestValidation:
    def test_defaults_are_valid(self):
        cfg = ExperimentConfig()
        assert cfg.tasks == ("r", "s", "c", "j")
        assert cfg.batch_size == 64
        assert cfg.momentum == 0.9

    def test_task_checks(self):
        with pytest.raises(ConfigError, match="non-empty"):
            ExperimentConfig(tasks=())
        with pytest.raises(ConfigError, match="unknown tasks"):
            ExperimentConfig(tasks=("r", "x"))
        with pytest.raises(ConfigError, match="unique"):
            ExperimentConfig(tasks=("r", "r"))

    def test_numeric_checks(self):
        with pytest.raises(ConfigError, match="epochs"):
            ExperimentConfig(epochs=0)
        with pytest.raises(ConfigError, match="batch_size"):
            ExperimentConfig(batch_size=0)
        with pytest.raises(ConfigError, match="learning_rate"):
            ExperimentConfig(learning_rate=0.0)

    def test_tte_section(self):
        with pytest.raises(ConfigError, match="fusion"):
            TteConfig(fusion="centroid")
        with pytest.raises(ConfigError, match="mode"):
            TteConfig(mode="rms")
        with pytest.raises(ConfigError, match="m_max"):
            TteConfig(m_max=1.0)
        with pytest.raises(ConfigError, match="window"):
            TteConfig(window=0)

    def test_regularizer_section(self):
        assert RegularizerConfig().kind == "kld"
        with pytest.raises(ConfigError, match="scale"):
            RegularizerConfig(scale=-0.1)
        with pytest.raises(ConfigError, match="prior"):
            RegularizerConfig(prior="zipf")
        # scale zero is the documented off switch
        assert RegularizerConfig(scale=0.0).scale == 0.0

    def test_data_section(self):
        with pytest.raises(ConfigError, match="kind"):
            DataConfig(kind="tarball")
        with pytest.raises(ConfigError, match="path"):
            DataConfig(kind="directory", path=None)
        with pytest.raises(ConfigError, match="sensible"):
            DataConfig(n_images=0)

    def test_jigsaw_section(self):
        with pytest.raises(ConfigError, match="count"):
            JigsawConfig(count=0)


class TestSerialization:
    def test_dict_round_trip(self):
        cfg = ExperimentConfig(tasks=("r", "j"), epochs=3, seed=11,
                               tte=TteConfig(fusion="mean", window=3),
                               regularizer=RegularizerConfig(kind="jsd", scale=0.5))
        back = config_from_dict(config_to_dict(cfg))
        assert back == cfg

    def test_yaml_round_trip(self, tmp_path):
        cfg = ExperimentConfig(encoder_widths=(8, 16), epochs=2,
                               data=DataConfig(n_images=100, image_size=16))
        path = tmp_path / "exp.yaml"
        save_config(cfg, path)
        assert load_config(path) == cfg

    def test_yaml_has_no_python_tags(self, tmp_path):
        path = tmp_path / "exp.yaml"
        save_config(ExperimentConfig(), path)
        text = path.read_text()
        assert "python" not in text
        assert "tasks:" in text

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown config keys"):
            config_from_dict({"optimizer": "adam"})

    def test_bad_section_field_rejected(self):
        with pytest.raises(ConfigError, match="bad config structure"):
            config_from_dict({"tte": {"turbo": True}})

    def test_non_mapping_rejected(self):
        with pytest.raises(ConfigError, match="mapping"):
            config_from_dict([1, 2, 3])

    def test_empty_document_gives_defaults(self, tmp_path):
        path = tmp_path / "empty.yaml"
        path.write_text("")
        assert load_config(path) == ExperimentConfig()

    def test_unparseable_yaml(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("tasks: [r, s\n:::")
        with pytest.raises(ConfigError, match="cannot parse"):
            load_config(path)


class TestHashing:
    def test_stable_across_processes(self):
        # frozen value: changing the hash breaks existing run-dir layouts
        a = config_hash(ExperimentConfig())
        b = config_hash(config_from_dict(config_to_dict(ExperimentConfig())))
        assert a == b
        assert len(a) == 12

    def test_out_root_excluded(self):
        a = config_hash(ExperimentConfig(out_root="runs"))
        b = config_hash(ExperimentConfig(out_root="/elsewhere"))
        assert a == b

    def test_any_other_field_included(self):
        base = ExperimentConfig()
        assert config_hash(base) != config_hash(dataclasses.replace(base, epochs=11))
        assert config_hash(base) != config_hash(dataclasses.replace(base, seed=1))

    def test_run_dir_name_embeds_seed(self):
        cfg = ExperimentConfig(seed=42)
        name = run_dir_name(cfg)
        assert name.endswith("-s42")
        assert name.startswith(config_hash(cfg))
