"""Flat `key = value` run configuration shared by the CLI and the training
driver. Unknown keys are errors; command-line flags override file values."""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .scene import SceneConfig, TargetSpec


class ConfigError(Exception):
    pass


@dataclass
class SplConfig:
    """Settings for one self-paced training run."""

    k: int = 8  # free cluster count (reference cluster comes on top)
    rounds: int = 10
    epochs_per_round: int = 10
    batch_size: int = 64
    lr: float = 2e-2
    lr_min: float = 5e-4
    lr_anneal_epochs: int = 100
    weight_decay: float = 1e-4
    optimizer: str = "sgd"  # sgd | adam
    epsilon: float = 0.1
    attack: str = "fgsm"  # fgsm | pgd
    pgd_steps: int = 10
    balanced: bool = False
    min_cluster_size: int = 2
    disc_steps: int = 200
    disc_lr: float = 1e-3
    classifier_hidden: int = 32
    pretrain_epochs: int = 150
    pretrain_lr: float = 5e-2
    pretrain_batch: int = 256
    temperature: float = 0.5
    encoder_hidden: int = 128
    embed_dim: int = 64
    cluster_inits: int = 8
    canonical_mirror: bool = False
    standard_denominator: bool = False
    seed: int = 0

    def validate(self) -> None:
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.epochs_per_round < 0:
            raise ConfigError("epochs_per_round must be >= 0")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.attack not in ("fgsm", "pgd"):
            raise ConfigError(f"unknown attack {self.attack!r}")
        if self.epsilon < 0:
            raise ConfigError("epsilon must be >= 0")


_SCENE_KEYS = {
    "scene_height": ("height", int),
    "scene_width": ("width", int),
    "scene_bands": ("bands", int),
    "scene_materials": ("materials", int),
    "scene_noise": ("noise", float),
    "scene_seed": ("seed", int),
    "wavelength_start": ("wavelength_start", float),
    "wavelength_end": ("wavelength_end", float),
    "attenuation_min": ("attenuation_min", float),
    "attenuation_max": ("attenuation_max", float),
}


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("on", "true", "1", "yes"):
        return True
    if lowered in ("off", "false", "0", "no"):
        return False
    raise ConfigError(f"cannot parse boolean value {text!r}")


def parse_targets(text: str) -> list:
    """`row,col,height,width,depth` groups separated by semicolons."""
    targets = []
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        parts = [p.strip() for p in chunk.split(",")]
        if len(parts) != 5:
            raise ConfigError(f"target spec needs 5 fields, got {chunk!r}")
        targets.append(
            TargetSpec(int(parts[0]), int(parts[1]), int(parts[2]), int(parts[3]), float(parts[4]))
        )
    if not targets:
        raise ConfigError("empty target list")
    return targets


def format_targets(targets: list) -> str:
    return "; ".join(
        f"{t.row},{t.col},{t.height},{t.width},{t.depth_m}" for t in targets
    )


def parse_config_text(text: str) -> dict:
    """key = value lines; '#' starts a comment; values keep internal commas."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def load_config_file(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(p.read_text())


def build_configs(values: dict) -> tuple:
    """Turn a flat key -> string map into (SceneConfig, SplConfig); unknown
    keys raise, naming the offender."""
    scene = SceneConfig()
    spl = SplConfig()
    spl_fields = {f.name: f.type for f in fields(SplConfig)}
    for key, raw in values.items():
        if key == "scene_targets":
            scene.targets = parse_targets(raw)
        elif key in _SCENE_KEYS:
            attr, cast = _SCENE_KEYS[key]
            try:
                setattr(scene, attr, cast(raw))
            except ValueError as exc:
                raise ConfigError(f"bad value for {key!r}: {raw!r}") from exc
        elif key in spl_fields:
            current = getattr(spl, key)
            try:
                if isinstance(current, bool):
                    setattr(spl, key, _parse_bool(raw))
                elif isinstance(current, int):
                    setattr(spl, key, int(raw))
                elif isinstance(current, float):
                    setattr(spl, key, float(raw))
                else:
                    setattr(spl, key, str(raw))
            except (ValueError, ConfigError) as exc:
                raise ConfigError(f"bad value for {key!r}: {raw!r}") from exc
        else:
            raise ConfigError(f"unknown config key {key!r}")
    spl.validate()
    return scene, spl


def snapshot(scene: SceneConfig, spl: SplConfig) -> dict:
    """Flat string map that reproduces both configs through build_configs."""
    out = {}
    for key, (attr, _) in _SCENE_KEYS.items():
        out[key] = str(getattr(scene, attr))
    out["scene_targets"] = format_targets(scene.targets)
    for f in fields(SplConfig):
        value = getattr(spl, f.name)
        if isinstance(value, bool):
            out[f.name] = "on" if value else "off"
        elif isinstance(value, float):
            out[f.name] = repr(value)
        else:
            out[f.name] = str(value)
    return out


def write_config_file(values: dict, path) -> None:
    lines = [f"{k} = {v}" for k, v in values.items()]
    Path(path).write_text("\n".join(lines) + "\n")
