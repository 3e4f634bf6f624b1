import dataclasses

import pytest
import yaml

from agemorph.config import (RunConfig, _SECTIONS, document_defaults)
from agemorph.errors import ConfigError


class TestLoading:
    def test_defaults(self):
        cfg = RunConfig.load(None, env={})
        assert cfg.train.learning_rate == 1e-4
        assert cfg.train.batch_size == 64
        assert cfg.loss_weights().lambda_tv == 5e-5
        assert cfg.resolution() == (64, 64)
        assert cfg.scheme().lower_bounds == (11, 21, 31, 41, 51)

    def test_yaml_roundtrip(self, tmp_path):
        cfg = RunConfig.load(None, env={})
        path = tmp_path / "c.yaml"
        path.write_text(cfg.to_yaml())
        again = RunConfig.load(path, env={})
        assert again.to_dict() == cfg.to_dict()

    def test_missing_file(self):
        with pytest.raises(ConfigError) as exc:
            RunConfig.load("/nonexistent/config.yaml", env={})
        assert "/nonexistent/config.yaml" in str(exc.value)

    def test_unknown_section(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("training:\n  batch_size: 4\n")
        with pytest.raises(ConfigError) as exc:
            RunConfig.load(path, env={})
        assert "training" in str(exc.value)

    def test_unknown_key_named(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("train:\n  learning_rat: 0.1\n")
        with pytest.raises(ConfigError) as exc:
            RunConfig.load(path, env={})
        assert "train.learning_rat" in str(exc.value)

    def test_type_errors_name_key(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("train:\n  batch_size: sixty-four\n")
        with pytest.raises(ConfigError) as exc:
            RunConfig.load(path, env={})
        assert "train.batch_size" in str(exc.value)

    def test_partial_override(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("train:\n  batch_size: 8\ndata:\n  synth_n: 50\n")
        cfg = RunConfig.load(path, env={})
        assert cfg.train.batch_size == 8
        assert cfg.data.synth_n == 50
        assert cfg.train.learning_rate == 1e-4  # untouched default


class TestResolution:
    def test_square_shortcut(self):
        cfg = RunConfig.from_dict({"train": {"resolution": 32}})
        assert cfg.resolution() == (32, 32)

    def test_pair(self):
        cfg = RunConfig.from_dict({"train": {"resolution": [48, 64]}})
        assert cfg.resolution() == (48, 64)

    def test_bad_value(self):
        cfg = RunConfig.from_dict({"train": {"resolution": [1, 2, 3]}})
        with pytest.raises(ConfigError):
            cfg.resolution()


class TestEnvOverrides:
    def test_numeric_and_boolean(self):
        env = {"AGEMORPH_TRAIN_LEARNING_RATE": "2e-4",
               "AGEMORPH_DATA_SYNTH_N": "123",
               "AGEMORPH_TRAIN_EXCLUDE_SOURCE_TARGETS": "true"}
        cfg = RunConfig.load(None, env=env)
        assert cfg.train.learning_rate == 2e-4
        assert cfg.data.synth_n == 123
        assert cfg.train.exclude_source_targets is True

    def test_env_overrides_file(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("train:\n  batch_size: 8\n")
        cfg = RunConfig.load(path, env={"AGEMORPH_TRAIN_BATCH_SIZE": "16"})
        assert cfg.train.batch_size == 16

    def test_bad_env_section(self):
        with pytest.raises(ConfigError):
            RunConfig.load(None, env={"AGEMORPH_OPTIM_LR": "0.1"})

    def test_unknown_env_key_named(self):
        with pytest.raises(ConfigError) as exc:
            RunConfig.load(None, env={"AGEMORPH_TRAIN_LEARNINGRATE": "0.1"})
        assert "train.learningrate" in str(exc.value)


class TestDocumentation:
    def test_every_key_documented_with_default(self):
        text = document_defaults()
        for section_name, section_cls in _SECTIONS.items():
            for f in dataclasses.fields(section_cls):
                assert f"{section_name}.{f.name} = " in text

    def test_defaults_match_dataclasses(self):
        text = document_defaults()
        assert "train.lambda_adv = 10.0" in text
        assert "train.lambda_cls = 100.0" in text
        assert "train.lambda_tv = 5e-05" in text
        assert "eval.threshold = 73.975" in text
