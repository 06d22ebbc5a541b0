"""Flat key = value configuration parsing."""

import pytest

from hutd.config import (
    ConfigError,
    SplConfig,
    build_configs,
    parse_config_text,
    parse_targets,
    snapshot,
)
from hutd.scene import SceneConfig


def test_parse_basic_text():
    values = parse_config_text(
        """
        # a comment
        k = 5
        attack = pgd   # trailing comment
        scene_noise = 0.03
        """
    )
    assert values == {"k": "5", "attack": "pgd", "scene_noise": "0.03"}


def test_parse_rejects_non_assignment():
    with pytest.raises(ConfigError, match="line 1"):
        parse_config_text("just words")


def test_build_configs_applies_values():
    scene, spl = build_configs({"k": "5", "scene_bands": "30", "balanced": "on",
                                "epsilon": "0.2", "scene_targets": "1,1,2,2,0.5"})
    assert spl.k == 5 and spl.balanced is True and spl.epsilon == 0.2
    assert scene.bands == 30
    assert len(scene.targets) == 1 and scene.targets[0].depth_m == 0.5


def test_unknown_key_is_named():
    with pytest.raises(ConfigError, match="mystery_knob"):
        build_configs({"mystery_knob": "1"})


def test_bad_value_is_named():
    with pytest.raises(ConfigError, match="'k'"):
        build_configs({"k": "many"})
    with pytest.raises(ConfigError, match="balanced"):
        build_configs({"balanced": "sideways"})


def test_validation_catches_bad_combos():
    with pytest.raises(ConfigError):
        build_configs({"rounds": "0"})
    with pytest.raises(ConfigError):
        build_configs({"optimizer": "rmsprop"})
    with pytest.raises(ConfigError):
        build_configs({"attack": "fab"})


def test_parse_targets_syntax():
    targets = parse_targets("1,2,3,4,0.5; 6,7,2,2,1.25")
    assert len(targets) == 2
    assert targets[1].depth_m == 1.25
    with pytest.raises(ConfigError):
        parse_targets("1,2,3")
    with pytest.raises(ConfigError):
        parse_targets("")


def test_snapshot_roundtrip():
    scene = SceneConfig(bands=24, noise=0.015, seed=9)
    spl = SplConfig(k=3, lr=0.0125, balanced=True, attack="pgd", seed=9)
    values = snapshot(scene, spl)
    scene2, spl2 = build_configs(values)
    assert scene2 == scene
    assert spl2 == spl
