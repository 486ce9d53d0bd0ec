import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rvfusion.fusionio import FUSED_DIM, FusedCloud, SRC_LIDAR, SRC_RADAR
from rvfusion.voxel import (GridConfig, Voxel, build_voxel_batch, cap_voxel,
                            to_sparse, voxel_center, voxelize)


def make_cloud(xyz, source=None):
    xyz = np.asarray(xyz, dtype=float)
    feats = np.zeros((len(xyz), FUSED_DIM))
    feats[:, :3] = xyz
    if source is None:
        source = np.full(len(xyz), SRC_LIDAR)
    return FusedCloud(feats, source)


CFG = GridConfig()


class TestGridConfig:
    def test_dims(self):
        assert (CFG.nx, CFG.ny, CFG.nz) == (250, 200, 15)

    def test_invalid(self):
        with pytest.raises(ValueError):
            GridConfig(voxel_xy=0.0)
        with pytest.raises(ValueError):
            GridConfig(x_range=(10.0, 10.0))


class TestVoxelize:
    def test_center_offsets_zero(self):
        center = voxel_center((10, 20, 5), CFG)
        voxels = voxelize(make_cloud([center]), CFG)
        assert len(voxels) == 1
        assert voxels[0].coord == (10, 20, 5)
        np.testing.assert_allclose(voxels[0].features[0, 10:13], 0.0, atol=1e-12)

    def test_lower_boundary_in_cell_zero(self):
        voxels = voxelize(make_cloud([[0.0, -20.0, -3.0]]), CFG)
        assert voxels[0].coord == (0, 0, 0)

    def test_upper_boundary_discarded(self):
        assert voxelize(make_cloud([[50.0, 0.0, 0.0]]), CFG) == []

    def test_partition_and_reconstruction(self, rng):
        n = 2000
        xyz = np.column_stack([rng.uniform(-5, 55, n),
                               rng.uniform(-25, 25, n),
                               rng.uniform(-4, 4, n)])
        cloud = make_cloud(xyz)
        voxels = voxelize(cloud, CFG)
        in_range = ((xyz[:, 0] >= 0) & (xyz[:, 0] < 50)
                    & (xyz[:, 1] >= -20) & (xyz[:, 1] < 20)
                    & (xyz[:, 2] >= -3) & (xyz[:, 2] < 3))
        assert sum(len(v.features) for v in voxels) == in_range.sum()
        for v in voxels:
            center = voxel_center(v.coord, CFG)
            recon = center + v.features[:, 10:13]
            np.testing.assert_allclose(recon, v.features[:, :3], atol=1e-9)
            assert np.all(np.abs(v.features[:, 10:12]) <= CFG.voxel_xy / 2 + 1e-9)
            assert np.all(np.abs(v.features[:, 12]) <= CFG.voxel_z / 2 + 1e-9)

    def test_sorted_by_coord(self, rng):
        xyz = rng.uniform([0, -20, -3], [50, 20, 3], size=(500, 3))
        voxels = voxelize(make_cloud(xyz), CFG)
        coords = [v.coord for v in voxels]
        assert coords == sorted(coords)


class TestCapVoxel:
    def _voxel(self, n_lidar, n_radar):
        src = np.concatenate([np.full(n_lidar, SRC_LIDAR),
                              np.full(n_radar, SRC_RADAR)])
        feats = np.arange(len(src) * 13, dtype=float).reshape(-1, 13)
        return Voxel((0, 0, 0), feats, src)

    def test_under_cap_unchanged(self):
        v = self._voxel(30, 0)
        out = cap_voxel(v, np.random.default_rng(0))
        assert out is v

    def test_radar_all_kept(self):
        v = self._voxel(50, 5)
        out = cap_voxel(v, np.random.default_rng(0))
        assert len(out.features) == 40
        assert np.sum(out.source == SRC_RADAR) == 5

    def test_radar_only_sampled(self):
        v = self._voxel(0, 45)
        out = cap_voxel(v, np.random.default_rng(0))
        assert len(out.features) == 40
        assert (out.source == SRC_RADAR).all()

    @settings(max_examples=1000, deadline=None)
    @given(n_lidar=st.integers(0, 80), n_radar=st.integers(0, 80),
           seed=st.integers(0, 2 ** 32 - 1))
    def test_no_radar_dropped_before_lidar(self, n_lidar, n_radar, seed):
        v = self._voxel(n_lidar, n_radar)
        out = cap_voxel(v, np.random.default_rng(seed))
        kept_radar = int(np.sum(out.source == SRC_RADAR))
        kept_lidar = int(np.sum(out.source == SRC_LIDAR))
        if n_lidar + n_radar <= 40:
            assert (kept_lidar, kept_radar) == (n_lidar, n_radar)
        else:
            assert kept_lidar + kept_radar == 40
            if kept_lidar > 0 and kept_radar < n_radar:
                raise AssertionError("radar point dropped while lidar kept")


class TestToSparse:
    def test_empty(self):
        sp = to_sparse(np.zeros((0, 4)), np.zeros((0, 3)))
        assert len(sp) == 0

    def test_single(self):
        sp = to_sparse(np.ones((1, 4)), [[1, 2, 3]])
        assert len(sp) == 1

    def test_shuffle_determinism(self, rng):
        coords = np.array([[i, j, k] for i in range(3) for j in range(3)
                           for k in range(2)])
        feats = rng.normal(size=(len(coords), 5))
        perm = rng.permutation(len(coords))
        a = to_sparse(feats, coords)
        b = to_sparse(feats[perm], coords[perm])
        np.testing.assert_array_equal(a.coords, b.coords)
        np.testing.assert_allclose(a.features, b.features)

    def test_duplicates_rejected(self):
        with pytest.raises(ValueError):
            to_sparse(np.ones((2, 4)), [[0, 0, 0], [0, 0, 0]])


class TestVoxelBatch:
    def test_byte_determinism(self, rng):
        xyz = rng.uniform([0, -20, -3], [50, 20, 3], size=(3000, 3))
        # concentrate points to force capping
        xyz[:1500] = xyz[:1500] * 0.01 + [10, 0, 0]
        src = np.where(rng.random(3000) < 0.1, SRC_RADAR, SRC_LIDAR)
        cloud = make_cloud(xyz, src)
        a = build_voxel_batch(cloud, CFG, seed=7)
        b = build_voxel_batch(cloud, CFG, seed=7)
        assert a.features.tobytes() == b.features.tobytes()
        assert a.coords.tobytes() == b.coords.tobytes()
        assert a.mask.tobytes() == b.mask.tobytes()
        c = build_voxel_batch(cloud, CFG, seed=8)
        assert a.features.tobytes() != c.features.tobytes()

    def test_mask_counts(self):
        cloud = make_cloud([[10.05, 0.05, 0.1], [10.06, 0.04, 0.1],
                            [30.0, 5.0, 0.0]])
        batch = build_voxel_batch(cloud, CFG)
        assert batch.mask.sum() == 3
        assert len(batch.coords) == 2
