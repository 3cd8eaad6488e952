"""Dual-stream sparse encoder with per-stage cross-scale fusion.

Each stream runs two submanifold conv blocks and one stride-2 strided conv
per stage, halving dims (ceil) and doubling channels. After every stage but
the last, the streams exchange features bidirectionally: the fine stream is
pooled onto the coarse grid and concatenated, the coarse stream is upsampled
by trilinear interpolation onto the fine occupancy and concatenated, and a
1x1x1 conv restores each stream's channel width. The last stage fuses in one
direction only (fine pooled onto coarse), and the coarse stream is the
encoder output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, init_uniform
from .sparse import (ConvSpec, ShapeError, SparseTensor3D, avg_pool,
                     concat_channels, max_pool, sparse_conv, upsample_lerp)
from .voxelize import ConfigError, VoxelGrid


@dataclass
class BackboneConfig:
    num_stages: int = 3
    base_channels: int = 16
    in_channels: int = 6
    fusion_downsampler: str = "max"
    fusion_enabled_stages: tuple[bool, ...] | None = None
    scale_ratio: int = 2

    def __post_init__(self):
        if self.num_stages < 1:
            raise ConfigError(f"num_stages must be >= 1, got {self.num_stages}")
        if self.base_channels < 1:
            raise ConfigError("base_channels must be >= 1")
        if self.fusion_downsampler not in ("max", "avg"):
            raise ConfigError(
                f"fusion_downsampler must be 'max' or 'avg', got "
                f"{self.fusion_downsampler!r}")
        ratio = self.scale_ratio
        if int(ratio) != ratio or int(ratio) < 2:
            raise ConfigError(f"scale_ratio must be an integer >= 2, got {ratio}")
        self.scale_ratio = int(ratio)
        if self.fusion_enabled_stages is None:
            self.fusion_enabled_stages = tuple(True for _ in range(self.num_stages))
        self.fusion_enabled_stages = tuple(bool(f) for f in self.fusion_enabled_stages)
        if len(self.fusion_enabled_stages) != self.num_stages:
            raise ConfigError("fusion_enabled_stages must have one flag per stage")
        if not self.fusion_enabled_stages[-1]:
            raise ConfigError(
                "final-stage fusion produces the encoder output and cannot be disabled")

    def stage_channels(self, stage: int) -> tuple[int, int]:
        """(input, output) channel widths of a 1-based stage."""
        cin = self.base_channels * (2 ** (stage - 1))
        return cin, 2 * cin

    @property
    def out_channels(self) -> int:
        return self.base_channels * (2 ** self.num_stages)

    def out_dims(self, large_dims) -> tuple[int, int, int]:
        dims = tuple(large_dims)
        for _ in range(self.num_stages):
            dims = tuple(-(-d // 2) for d in dims)
        return dims


@dataclass
class StageFeatures:
    """The pair of per-stream feature volumes at one stage boundary."""

    large: SparseTensor3D
    small: SparseTensor3D


def init_backbone_params(store: ParamStore, cfg: BackboneConfig,
                         rng: np.random.Generator) -> None:
    """Create all encoder parameters under 'large.*', 'small.*', 'fuse*.*'."""

    def conv(name, kernel_volume, cin, cout):
        store.add(f"{name}.w", init_uniform(rng, (kernel_volume, cin, cout),
                                            kernel_volume * cin))
        store.add(f"{name}.b", np.zeros(cout))

    for stream in ("large", "small"):
        conv(f"{stream}.stem", 27, cfg.in_channels, cfg.base_channels)
        for s in range(1, cfg.num_stages + 1):
            cin, cout = cfg.stage_channels(s)
            conv(f"{stream}.stage{s}.sub1", 27, cin, cin)
            conv(f"{stream}.stage{s}.sub2", 27, cin, cin)
            conv(f"{stream}.stage{s}.down", 27, cin, cout)
    for s in range(1, cfg.num_stages + 1):
        if not cfg.fusion_enabled_stages[s - 1]:
            continue
        width = cfg.stage_channels(s)[1]
        conv(f"fuse{s}.to_large", 1, 2 * width, width)
        if s < cfg.num_stages:
            conv(f"fuse{s}.to_small", 1, 2 * width, width)


def _relu_tensor(x: SparseTensor3D) -> SparseTensor3D:
    return SparseTensor3D(x.dims, x.coords, ad.relu(x.feats))


def _conv(x: SparseTensor3D, store: ParamStore, name: str, spec: ConvSpec,
          activate: bool = True) -> SparseTensor3D:
    out = sparse_conv(x, spec, store[f"{name}.w"], store[f"{name}.b"])
    return _relu_tensor(out) if activate else out


def _stream_stage(x: SparseTensor3D, store: ParamStore, prefix: str,
                  cin: int, cout: int) -> SparseTensor3D:
    x = _conv(x, store, f"{prefix}.sub1", ConvSpec(cin, cin))
    x = _conv(x, store, f"{prefix}.sub2", ConvSpec(cin, cin))
    return _conv(x, store, f"{prefix}.down",
                 ConvSpec(cin, cout, stride=2, mode="strided"))


def stage_forward(feats: StageFeatures, store: ParamStore, cfg: BackboneConfig,
                  stage: int) -> StageFeatures:
    """One encoder stage on both streams; checks the halve/double contract."""
    cin, cout = cfg.stage_channels(stage)
    for name, stream in (("large", feats.large), ("small", feats.small)):
        if stream.channels != cin:
            raise ShapeError(
                f"{name} stream enters stage {stage} with {stream.channels} "
                f"channels, expected {cin}")
    out = StageFeatures(
        _stream_stage(feats.large, store, f"large.stage{stage}", cin, cout),
        _stream_stage(feats.small, store, f"small.stage{stage}", cin, cout),
    )
    for before, after in ((feats.large, out.large), (feats.small, out.small)):
        want_dims = tuple(-(-d // 2) for d in before.dims)
        if tuple(after.dims) != want_dims or after.channels != 2 * before.channels:
            raise ShapeError(
                f"stage {stage} violated the halve/double contract: "
                f"{before.dims}x{before.channels} -> {after.dims}x{after.channels}")
    return out


def cif_fuse(feats: StageFeatures, store: ParamStore, cfg: BackboneConfig,
             stage: int, direction: str) -> StageFeatures:
    """Cross-scale fusion at one stage boundary.

    ``bidirectional`` updates both streams from each other's pre-fusion
    features; ``small_to_large`` (final stage) updates only the coarse stream.
    """
    if direction not in ("bidirectional", "small_to_large"):
        raise ConfigError(f"unknown fusion direction {direction!r}")
    large, small = feats.large, feats.small
    ratio = cfg.scale_ratio
    width = large.channels
    pool = max_pool if cfg.fusion_downsampler == "max" else avg_pool
    pooled = pool(small, ratio)
    if tuple(pooled.dims) != tuple(large.dims):
        raise ShapeError(
            f"pooled small dims {pooled.dims} do not match large dims {large.dims}")
    mix = ConvSpec(2 * width, width, kernel=1)
    new_large = _conv(concat_channels(large, pooled), store,
                      f"fuse{stage}.to_large", mix, activate=False)
    if direction == "small_to_large":
        return StageFeatures(new_large, small)
    up = upsample_lerp(large, ratio, small.coords, target_dims=small.dims)
    new_small = _conv(concat_channels(small, up), store,
                      f"fuse{stage}.to_small", mix, activate=False)
    return StageFeatures(new_large, new_small)


def backbone_forward(large_grid: VoxelGrid, small_grid: VoxelGrid,
                     store: ParamStore, cfg: BackboneConfig) -> SparseTensor3D:
    """Run the full encoder; returns the fused coarse-resolution volume."""
    large = SparseTensor3D.from_grid(large_grid)
    small = SparseTensor3D.from_grid(small_grid)
    for t in (large, small):
        if t.channels != cfg.in_channels:
            raise ShapeError(
                f"encoder expects {cfg.in_channels} input channels, got {t.channels}")
    stem = ConvSpec(cfg.in_channels, cfg.base_channels)
    feats = StageFeatures(_conv(large, store, "large.stem", stem),
                          _conv(small, store, "small.stem", stem))
    fused = None
    for s in range(1, cfg.num_stages + 1):
        feats = stage_forward(feats, store, cfg, s)
        if s < cfg.num_stages:
            if cfg.fusion_enabled_stages[s - 1]:
                feats = cif_fuse(feats, store, cfg, s, "bidirectional")
        else:
            fused = cif_fuse(feats, store, cfg, s, "small_to_large").large
    return fused
