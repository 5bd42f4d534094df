"""Run configuration schema, presets, and serialization."""

import pytest

from voxsynth.config import (
    PATCH_PRESETS,
    ConfigError,
    RunConfig,
    from_dict,
    load_config,
    save_config,
)


def test_defaults_resolve_to_a_valid_config():
    cfg = RunConfig()
    assert cfg.task_name == "mr2ct"
    assert cfg.arch == "resunet"
    assert cfg.loss == "l1"
    assert cfg.step_fraction == 0.3
    assert cfg.lambda_l1 == 5.0
    assert cfg.train.lr0 == 0.01
    assert cfg.train.momentum == 0.99


def test_patch_presets_by_region_and_task():
    assert PATCH_PRESETS[("HN", 1)] == (56, 192, 192)
    assert PATCH_PRESETS[("HN", 2)] == (56, 192, 192)
    assert PATCH_PRESETS[("AB", 1)] == (48, 192, 224)
    assert PATCH_PRESETS[("TH", 1)] == (48, 192, 224)
    assert PATCH_PRESETS[("AB", 2)] == (40, 224, 224)
    assert PATCH_PRESETS[("TH", 2)] == (40, 224, 224)


def test_resolved_patch_prefers_explicit_dims():
    assert RunConfig(region="AB", task=2).resolved_patch() == (40, 224, 224)
    assert RunConfig(region="AB", task=2, patch_dims=(16, 16, 16)).resolved_patch() == (
        16, 16, 16,
    )


def test_network_spec_maps_arch_and_upsample_names():
    spec = RunConfig(arch="resunet", upsample="trilinear").network_spec()
    assert spec.block == "residual"
    assert spec.upsample == "conv_trilinear"
    spec = RunConfig(arch="unet", upsample="tconv").network_spec(head="segmentation_7ch")
    assert spec.block == "plain"
    assert spec.upsample == "transposed_conv"
    assert spec.head == "segmentation_7ch"


def test_round_trip_through_json(tmp_path):
    cfg = RunConfig(
        task=2, region="TH", arch="unet", loss="l1afp",
        patch_dims=(16, 32, 32), tap_indices=(0, 1),
    )
    save_config(cfg, tmp_path / "cfg.json")
    back = load_config(tmp_path / "cfg.json")
    assert back == cfg


def test_error_messages_carry_the_key_path():
    with pytest.raises(ConfigError, match="^task:"):
        RunConfig(task=3)
    with pytest.raises(ConfigError, match="^region:"):
        RunConfig(region="PELVIS")
    with pytest.raises(ConfigError, match="^arch:"):
        RunConfig(arch="vnet")
    with pytest.raises(ConfigError, match="^loss:"):
        RunConfig(loss="l2")
    with pytest.raises(ConfigError, match="^step_fraction:"):
        RunConfig(step_fraction=0.0)
    with pytest.raises(ConfigError, match="^schema_version:"):
        RunConfig(schema_version=99)


def test_unknown_keys_rejected_at_both_levels():
    with pytest.raises(ConfigError, match="optimizer: unknown key"):
        from_dict({"optimizer": "adam"})
    with pytest.raises(ConfigError, match="train.decay: unknown key"):
        from_dict({"train": {"decay": 0.5}})


def test_nested_train_errors_are_prefixed():
    with pytest.raises(ConfigError, match="^train:"):
        from_dict({"train": {"batch": 0}})


def test_invalid_json_file_is_a_config_error(tmp_path):
    p = tmp_path / "broken.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError, match="JSON"):
        load_config(p)


def test_bad_patch_dims_rejected():
    with pytest.raises(ConfigError, match="^patch_dims:"):
        RunConfig(patch_dims=(16, 16))
    with pytest.raises(ConfigError, match="^patch_dims:"):
        RunConfig(patch_dims=(16, 16, 0))
