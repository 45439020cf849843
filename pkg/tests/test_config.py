"""Config file semantics: defaults, merging, overrides, strict building."""

import pytest
import yaml

from needlebench.config import (
    SECTIONS,
    apply_override,
    build,
    default_config,
    from_mapping,
    load_config,
    save_config,
)
from needlebench.campaign import TrackingAblationConfig
from needlebench.datasets import TrackingDataConfig
from needlebench.tensor import ConfigError
from needlebench.training import Stage1Config


def test_defaults_cover_every_section():
    cfg = default_config()
    for name in SECTIONS:
        assert name in cfg
        assert isinstance(cfg[name], dict)
    assert cfg["stage1"]["epochs"] == 30
    assert cfg["data"]["n_videos"] == 60
    assert cfg["pipeline"]["tracking_period_s"] == 0.040
    assert cfg["ablation"]["seeds"] == [0, 1, 2]  # tuples emitted as lists
    assert cfg["run"]["dir"] == "runs/default"


def test_defaults_roundtrip_through_yaml(tmp_path):
    cfg = default_config()
    path = tmp_path / "c.yaml"
    save_config(cfg, path)
    again = load_config(path)
    assert again == cfg
    # and every dataclass section still builds
    for name in SECTIONS:
        build(again, name)


def test_file_merge_overrides_leaves_only(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump({"stage1": {"epochs": 3},
                                    "data": {"n_videos": 12}}))
    cfg = load_config(path)
    assert cfg["stage1"]["epochs"] == 3
    assert cfg["stage1"]["batch"] == 16  # untouched default
    assert cfg["data"]["n_videos"] == 12


def test_unknown_file_key_rejected(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump({"stage1": {"epochz": 3}}))
    with pytest.raises(ConfigError, match="stage1.epochz"):
        load_config(path)
    path.write_text(yaml.safe_dump({"nonsense": {}}))
    with pytest.raises(ConfigError, match="nonsense"):
        load_config(path)


def test_dotted_overrides():
    cfg = load_config(overrides=("stage1.epochs=2", "data.split=[0.5,0.25,0.25]",
                                 "ablation.stage1.batch=4"))
    assert cfg["stage1"]["epochs"] == 2
    assert cfg["data"]["split"] == [0.5, 0.25, 0.25]
    assert cfg["ablation"]["stage1"]["batch"] == 4
    assert build(cfg, "stage1").epochs == 2
    assert build(cfg, "data").split == (0.5, 0.25, 0.25)
    assert build(cfg, "ablation").stage1.batch == 4


def test_override_typo_and_shape_errors():
    cfg = default_config()
    with pytest.raises(ConfigError, match="stage1.epochz"):
        apply_override(cfg, "stage1.epochz=2")
    with pytest.raises(ConfigError, match="key=value"):
        apply_override(cfg, "stage1.epochs")
    with pytest.raises(ConfigError, match="unknown config key"):
        apply_override(cfg, "stage1.epochs.deep=2")


def test_from_mapping_strict_and_coercing():
    c = from_mapping(Stage1Config, {"epochs": 2, "lr": "1e-3"})
    assert c.epochs == 2 and c.lr == pytest.approx(1e-3)
    with pytest.raises(ConfigError, match="unknown keys"):
        from_mapping(Stage1Config, {"epoch": 2})
    with pytest.raises(ConfigError, match="must be a number"):
        from_mapping(Stage1Config, {"lr": "fast"})
    # nested dataclass + list->tuple conversion
    abl = from_mapping(TrackingAblationConfig,
                       {"seeds": [5], "data": {"n_videos": 6}})
    assert abl.seeds == (5,)
    assert isinstance(abl.data, TrackingDataConfig)
    assert abl.data.n_videos == 6
    assert abl.data.frames_per_video == 120  # untouched nested default
    with pytest.raises(ConfigError, match="ablation.data"):
        from_mapping(TrackingAblationConfig, {"data": 3}, "ablation")


def test_validation_still_applies_after_build():
    with pytest.raises(ConfigError):
        build(load_config(overrides=("stage1.lr=-1",)), "stage1")
    with pytest.raises(ConfigError):
        build(load_config(overrides=("pipeline.pipeline=threads",)), "pipeline")


def test_build_rejects_unbacked_section():
    with pytest.raises(ConfigError):
        build(default_config(), "run")
