"""Run configuration: one YAML document drives every tunable.

Schema (all keys optional; defaults shown by ``default_config_dict``):

    seed: 0
    crop_margin: 2.0
    voxel:
      size: [0.1, 0.1, 0.1]
      extent: [[-3.2, 3.2], [-3.2, 3.2], [-2.0, 2.0]]
      scale_ratio: 2.0
    backbone:
      num_stages: 3
      base_channels: 16
      fusion_downsampler: max        # or avg
      fusion_enabled_stages: [true, true, true]
    head:
      hidden: [64]
    loss:
      kind: rle                      # or l1
    train:
      epochs: 2
      lr: 0.002
      lr_schedule: linear            # or constant
      adam_betas: [0.9, 0.999]
      adam_eps: 1.0e-8
      grad_accum: 4
      jitter_translation: 0.3
      jitter_yaw: 0.1
    synthetic:
      num_frames: 20
      target_size: [1.8, 1.5, 4.2]
      min_speed: 0.15
      max_speed: 0.35
      max_yaw_rate: 0.03
      points_per_frame: 64
      clutter_density: 0.05
      dropout: 0.0
      distractor_count: 0

Unknown keys are rejected at parse time.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path

import yaml

from .backbone import BackboneConfig
from .synthetic import SyntheticSceneConfig
from .voxelize import ConfigError, VoxelizerConfig


def default_config_dict() -> dict:
    return {
        "seed": 0,
        "crop_margin": 2.0,
        "voxel": {
            "size": [0.1, 0.1, 0.1],
            "extent": [[-3.2, 3.2], [-3.2, 3.2], [-2.0, 2.0]],
            "scale_ratio": 2.0,
        },
        "backbone": {
            "num_stages": 3,
            "base_channels": 16,
            "fusion_downsampler": "max",
            "fusion_enabled_stages": None,  # default: enabled at every stage
        },
        "head": {"hidden": [64]},
        "loss": {"kind": "rle"},
        "train": {
            "epochs": 2,
            "lr": 2.0e-3,
            "lr_schedule": "linear",
            "adam_betas": [0.9, 0.999],
            "adam_eps": 1.0e-8,
            "grad_accum": 4,
            "jitter_translation": 0.3,
            "jitter_yaw": 0.1,
        },
        "synthetic": {
            "num_frames": 20,
            "target_size": [1.8, 1.5, 4.2],
            "min_speed": 0.15,
            "max_speed": 0.35,
            "max_yaw_rate": 0.03,
            "points_per_frame": 64,
            "clutter_density": 0.05,
            "dropout": 0.0,
            "distractor_count": 0,
        },
    }


@dataclass
class TrainSettings:
    epochs: int = 2
    lr: float = 2.0e-3
    lr_schedule: str = "linear"
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1.0e-8
    grad_accum: int = 4
    jitter_translation: float = 0.3
    jitter_yaw: float = 0.1

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("train.epochs must be >= 1")
        if self.lr <= 0:
            raise ConfigError("train.lr must be positive")
        if self.lr_schedule not in ("linear", "constant"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.grad_accum < 1:
            raise ConfigError("train.grad_accum must be >= 1")
        if self.jitter_translation < 0 or self.jitter_yaw < 0:
            raise ConfigError("jitter bounds must be >= 0")
        self.adam_betas = tuple(float(b) for b in self.adam_betas)
        if len(self.adam_betas) != 2 or not all(0 <= b < 1 for b in self.adam_betas):
            raise ConfigError("train.adam_betas must be two values in [0, 1)")


@dataclass
class RunConfig:
    seed: int
    crop_margin: float
    voxel: VoxelizerConfig
    backbone: BackboneConfig
    head_hidden: tuple[int, ...]
    loss_kind: str
    train: TrainSettings
    synthetic: SyntheticSceneConfig
    synthetic_num_frames: int = 20

    def __post_init__(self):
        if self.crop_margin < 0:
            raise ConfigError("crop_margin must be >= 0")
        if self.loss_kind not in ("rle", "l1"):
            raise ConfigError(f"loss.kind must be 'rle' or 'l1', "
                              f"got {self.loss_kind!r}")
        if any(h < 1 for h in self.head_hidden):
            raise ConfigError("head.hidden widths must be >= 1")


def _check_keys(section: dict, allowed: set[str], where: str) -> None:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")


def config_from_dict(data: dict) -> RunConfig:
    base = default_config_dict()
    data = data or {}
    _check_keys(data, set(base), "top-level")
    merged = copy.deepcopy(base)
    for key, value in data.items():
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{key} must be a mapping")
            _check_keys(value, set(base[key]), key)
            merged[key].update(value)
        else:
            merged[key] = value

    vox = merged["voxel"]
    voxel = VoxelizerConfig(
        voxel_size=tuple(vox["size"]),
        extent=tuple(tuple(pair) for pair in vox["extent"]),
        scale_ratio=float(vox["scale_ratio"]))
    bb = merged["backbone"]
    fusion_flags = bb["fusion_enabled_stages"]
    backbone = BackboneConfig(
        num_stages=int(bb["num_stages"]),
        base_channels=int(bb["base_channels"]),
        fusion_downsampler=bb["fusion_downsampler"],
        fusion_enabled_stages=(tuple(fusion_flags)
                               if fusion_flags is not None else None),
        scale_ratio=voxel.scale_ratio)
    synth = merged["synthetic"]
    synthetic = SyntheticSceneConfig(
        target_size=tuple(synth["target_size"]),
        max_speed=float(synth["max_speed"]),
        min_speed=float(synth["min_speed"]),
        max_yaw_rate=float(synth["max_yaw_rate"]),
        points_per_frame=int(synth["points_per_frame"]),
        clutter_density=float(synth["clutter_density"]),
        dropout=float(synth["dropout"]),
        distractor_count=int(synth["distractor_count"]),
        seed=int(merged["seed"]))
    num_frames = int(synth["num_frames"])
    if num_frames < 2:
        raise ConfigError("synthetic.num_frames must be >= 2")
    cfg = RunConfig(
        seed=int(merged["seed"]),
        crop_margin=float(merged["crop_margin"]),
        voxel=voxel,
        backbone=backbone,
        head_hidden=tuple(int(h) for h in merged["head"]["hidden"]),
        loss_kind=merged["loss"]["kind"],
        train=TrainSettings(
            epochs=int(merged["train"]["epochs"]),
            lr=float(merged["train"]["lr"]),
            lr_schedule=merged["train"]["lr_schedule"],
            adam_betas=tuple(merged["train"]["adam_betas"]),
            adam_eps=float(merged["train"]["adam_eps"]),
            grad_accum=int(merged["train"]["grad_accum"]),
            jitter_translation=float(merged["train"]["jitter_translation"]),
            jitter_yaw=float(merged["train"]["jitter_yaw"])),
        synthetic=synthetic,
        synthetic_num_frames=num_frames)
    return cfg


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    """Load a YAML run config, applying dotted-path overrides afterward."""
    if path is None:
        data = {}
    else:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML ({exc})") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    for item in overrides or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override path {key!r} crosses a scalar")
        node[parts[-1]] = yaml.safe_load(raw)
    return config_from_dict(data)


def default_config() -> RunConfig:
    return config_from_dict({})
