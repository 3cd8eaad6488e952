"""Voxel binning, the per-voxel mean encoder, and dual-scale fusion."""

import math

import numpy as np
import pytest

from gridtrack.geometry import PointCloud
from gridtrack.voxelize import (ConfigError, VoxelizerConfig, dual_voxelize,
                                encode_dynamic, fuse_frames, voxelize)


def small_cfg(**kw):
    defaults = dict(voxel_size=(0.5, 0.5, 0.5),
                    extent=((-1.0, 1.0), (-1.0, 1.0), (-1.0, 1.0)),
                    scale_ratio=2.0)
    defaults.update(kw)
    return VoxelizerConfig(**defaults)


class TestConfig:
    def test_default_dims(self):
        cfg = VoxelizerConfig()
        assert cfg.dims() == (64, 64, 40)
        assert cfg.dims(cfg.scale_ratio) == (32, 32, 20)

    def test_rejects_bad_extent(self):
        with pytest.raises(ConfigError):
            VoxelizerConfig(extent=((1.0, -1.0), (-1, 1), (-1, 1)))

    def test_rejects_ratio_below_one(self):
        with pytest.raises(ConfigError):
            VoxelizerConfig(scale_ratio=1.0)


class TestVoxelize:
    def test_point_at_extent_minimum_maps_to_origin_voxel(self):
        cfg = small_cfg()
        grid = voxelize(PointCloud(np.array([[-1.0, -1.0, -1.0]])), cfg)
        assert grid.coords.tolist() == [[0, 0, 0]]

    def test_floor_arithmetic_matches_scalar_oracle(self):
        cfg = small_cfg()
        rng = np.random.default_rng(0)
        pts = rng.uniform(-1.3, 1.3, size=(300, 3))
        grid = voxelize(PointCloud(pts), cfg)
        expect = {}
        for p in pts:
            idx = tuple(int(math.floor((p[a] - (-1.0)) / 0.5)) for a in range(3))
            if all(0 <= idx[a] < 4 for a in range(3)):
                expect[idx] = expect.get(idx, 0) + 1
        assert grid.count_map() == expect
        assert grid.dropped == 300 - sum(expect.values())

    def test_negative_raw_coordinate_shifts_nonnegative(self):
        # raw -0.1 with edge 0.5: floor(-0.2) = -1 unshifted; after the
        # extent-minimum shift the index is (-0.1 + 1.0) / 0.5 -> 1
        cfg = small_cfg()
        grid = voxelize(PointCloud(np.array([[-0.1, -0.1, -0.1]])), cfg)
        assert grid.coords.tolist() == [[1, 1, 1]]

    def test_permutation_invariance(self):
        cfg = small_cfg()
        rng = np.random.default_rng(1)
        pts = rng.uniform(-1, 1, size=(500, 3))
        base = encode_dynamic(voxelize(PointCloud(pts), cfg))
        for _ in range(5):
            perm = rng.permutation(500)
            other = encode_dynamic(voxelize(PointCloud(pts[perm]), cfg))
            assert np.array_equal(base.coords, other.coords)
            assert np.array_equal(base.features, other.features)
            assert np.array_equal(base.counts, other.counts)

    def test_fully_out_of_extent_gives_empty_grid(self):
        cfg = small_cfg()
        grid = voxelize(PointCloud(np.array([[10.0, 10.0, 10.0]])), cfg)
        assert grid.num_voxels == 0
        assert grid.dropped == 1


class TestEncodeDynamic:
    def test_single_point_voxel_keeps_channels(self):
        cfg = small_cfg()
        grid = encode_dynamic(voxelize(PointCloud(np.array([[0.3, 0.2, -0.4]])), cfg))
        assert np.allclose(grid.features, [[0.3, 0.2, -0.4]])
        assert grid.counts.tolist() == [1]

    def test_two_point_mean(self):
        cfg = small_cfg()
        pts = np.array([[0.30, 0.30, 0.30], [0.40, 0.40, 0.40]])  # same voxel
        grid = encode_dynamic(voxelize(PointCloud(pts), cfg))
        assert grid.num_voxels == 1
        assert np.allclose(grid.features, [[0.35, 0.35, 0.35]])
        assert grid.counts.tolist() == [2]

    def test_matches_independent_mean(self):
        cfg = small_cfg()
        rng = np.random.default_rng(2)
        pts = rng.uniform(-1, 1, size=(400, 3))
        grid = encode_dynamic(voxelize(PointCloud(pts), cfg))
        fmap = grid.feature_map()
        cmap = grid.count_map()
        for coord, feat in fmap.items():
            members = [p for p in pts if tuple(
                int(math.floor((p[a] + 1.0) / 0.5)) for a in range(3)) == coord]
            members = np.array(sorted(map(tuple, members)))
            assert len(members) == cmap[coord]
            assert np.allclose(feat, members.mean(axis=0), rtol=0, atol=1e-12)

    def test_point_count_conserved(self):
        cfg = small_cfg()
        rng = np.random.default_rng(3)
        pts = rng.uniform(-1.5, 1.5, size=(600, 3))
        grid = encode_dynamic(voxelize(PointCloud(pts), cfg))
        assert grid.counts.sum() + grid.dropped == 600

    def test_no_nan_in_features(self):
        cfg = small_cfg()
        rng = np.random.default_rng(4)
        grid = encode_dynamic(voxelize(
            PointCloud(rng.uniform(-1, 1, size=(100, 3))), cfg))
        assert np.isfinite(grid.features).all()


class TestFuseFrames:
    def _grid(self, pts, cfg):
        return encode_dynamic(voxelize(PointCloud(np.asarray(pts, float)), cfg))

    def test_empty_current_pads_zero_block(self):
        cfg = small_cfg()
        prev = self._grid([[0.1, 0.1, 0.1]], cfg)
        cur = self._grid(np.zeros((0, 3)), cfg)
        fused = fuse_frames(prev, cur)
        assert fused.channels == 6
        assert np.allclose(fused.features[0, :3], prev.features[0])
        assert np.allclose(fused.features[0, 3:], 0.0)

    def test_both_frames_concatenated_prev_first(self):
        cfg = small_cfg()
        prev = self._grid([[0.1, 0.1, 0.1]], cfg)
        cur = self._grid([[0.2, 0.2, 0.2]], cfg)
        fused = fuse_frames(prev, cur)
        assert fused.num_voxels == 1
        assert np.allclose(fused.features[0], [0.1, 0.1, 0.1, 0.2, 0.2, 0.2])

    def test_occupancy_union_property(self):
        cfg = small_cfg()
        rng = np.random.default_rng(5)
        for _ in range(10):
            a = self._grid(rng.uniform(-1, 1, size=(40, 3)), cfg)
            b = self._grid(rng.uniform(-1, 1, size=(40, 3)), cfg)
            fused = fuse_frames(a, b)
            union = set(a.count_map()) | set(b.count_map())
            assert set(fused.count_map()) == union
            assert fused.counts.sum() == a.counts.sum() + b.counts.sum()

    def test_dims_mismatch_raises(self):
        cfg = small_cfg()
        other = small_cfg(voxel_size=(0.25, 0.25, 0.25))
        with pytest.raises(ConfigError):
            fuse_frames(self._grid([[0, 0, 0]], cfg), self._grid([[0, 0, 0]], other))


class TestDualVoxelize:
    def test_dims_ratio(self):
        cfg = VoxelizerConfig(voxel_size=(0.1, 0.1, 0.1),
                              extent=((-3.2, 3.2), (-3.2, 3.2), (-1.6, 1.6)),
                              scale_ratio=2.0)
        assert cfg.dims() == (64, 64, 32)
        assert cfg.dims(2.0) == (32, 32, 16)

    def test_single_point_coordinate_relation(self):
        cfg = small_cfg(voxel_size=(0.25, 0.25, 0.25))
        rng = np.random.default_rng(6)
        for _ in range(50):
            p = rng.uniform(-1, 1, size=3)
            large, small = dual_voxelize(PointCloud(p.reshape(1, 3)),
                                         PointCloud(np.zeros((0, 3))), cfg)
            assert small.num_voxels == 1 and large.num_voxels == 1
            assert np.array_equal(small.coords[0] // 2, large.coords[0])

    def test_empty_clouds_give_empty_grids(self):
        cfg = small_cfg()
        large, small = dual_voxelize(PointCloud.empty(), PointCloud.empty(), cfg)
        assert large.num_voxels == 0 and small.num_voxels == 0
        assert large.channels == 6 and small.channels == 6
