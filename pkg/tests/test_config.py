"""Config invariants and the flat key=value serialization."""

import dataclasses

import pytest

from refseg.config import (ModelConfig, config_from_kv, config_to_kv,
                           require_valid, validate_config)
from refseg.errors import ConfigError
from refseg.train import TrainConfig

from conftest import micro_config


def test_default_config_is_valid():
    assert validate_config(ModelConfig()) == []


def test_micro_config_is_valid():
    assert validate_config(micro_config()) == []


def test_resolution_chain_violation_names_the_rule():
    cfg = dataclasses.replace(ModelConfig(), image_size=60)
    violations = validate_config(cfg)
    assert any("resolution chain not integral" in v for v in violations)


def test_lang_depths_length_violation():
    cfg = dataclasses.replace(ModelConfig(), lang_depths=(3, 1, 1))
    assert any("lang_depths" in v for v in validate_config(cfg))


def test_max_tokens_floor():
    cfg = dataclasses.replace(ModelConfig(), max_tokens=1)
    assert any("max_tokens" in v for v in validate_config(cfg))


def test_head_divisibility_checks():
    cfg = dataclasses.replace(ModelConfig(), vision_heads=(3, 4, 8, 8))
    assert any("divisible by heads" in v for v in validate_config(cfg))
    cfg = dataclasses.replace(ModelConfig(), lang_heads=5)
    assert any("lang_heads" in v for v in validate_config(cfg))


def test_bad_direction_and_mode():
    cfg = dataclasses.replace(ModelConfig(), fusion_direction="sideways")
    assert any("fusion_direction" in v for v in validate_config(cfg))
    cfg = dataclasses.replace(ModelConfig(), loss_mode="nope")
    assert any("loss_mode" in v for v in validate_config(cfg))


def test_require_valid_raises_config_error():
    with pytest.raises(ConfigError, match="resolution chain"):
        require_valid(dataclasses.replace(ModelConfig(), image_size=60))


def test_kv_round_trip_model_config():
    cfg = dataclasses.replace(ModelConfig(), align_stages=(), lambda_align=0.25,
                              lang_depths=(6, 2, 2, 2), max_tokens=21)
    text = config_to_kv(cfg)
    assert "align_stages = \n" in text or "align_stages =\n" in text.replace(" \n", "\n")
    assert config_from_kv(text, ModelConfig) == cfg


def test_kv_round_trip_train_config():
    tc = TrainConfig(epochs=5, lambda_align=0.0, align_stages=(),
                     fusion_direction="vision_only")
    text = config_to_kv(tc)
    restored = config_from_kv(text, TrainConfig)
    assert restored == tc
    # None overrides are omitted from the file and stay None on reload
    assert restored.fusion_stages is None


def test_kv_unknown_key_strictness():
    with pytest.raises(ConfigError, match="unknown config key"):
        config_from_kv("no_such_field = 3\n", ModelConfig)
    cfg = config_from_kv("no_such_field = 3\nimage_size = 32\n",
                         ModelConfig, strict=False)
    assert cfg.image_size == 32


def test_kv_parse_errors():
    with pytest.raises(ConfigError, match="expected 'key = value'"):
        config_from_kv("not a kv line\n", ModelConfig)
    with pytest.raises(ConfigError, match="image_size"):
        config_from_kv("image_size = sixty\n", ModelConfig)


def test_kv_comments_and_blanks_ignored():
    cfg = config_from_kv("# comment\n\nimage_size = 128\n", ModelConfig)
    assert cfg.image_size == 128


def test_stage_resolutions():
    cfg = ModelConfig()
    assert [cfg.stage_resolution(i) for i in cfg.stages] == [16, 8, 4, 2]
    assert cfg.stage_tokens(1) == 256
