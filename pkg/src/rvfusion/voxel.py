"""Voxel grid partitioning, per-voxel point capping, sparse tensor assembly.

Per-point voxel features are 13-dimensional: the 10 fused features plus
(dx, dy, dz) offsets from the voxel center.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .fusionio import FUSED_DIM, SRC_RADAR, FusedCloud

VOXEL_DIM = FUSED_DIM + 3  # + dx, dy, dz


@dataclass(frozen=True)
class GridConfig:
    x_range: tuple = (0.0, 50.0)
    y_range: tuple = (-20.0, 20.0)
    z_range: tuple = (-3.0, 3.0)
    voxel_xy: float = 0.2
    voxel_z: float = 0.4
    max_points: int = 40

    def __post_init__(self):
        if self.voxel_xy <= 0 or self.voxel_z <= 0 or self.max_points < 1:
            raise ValueError("invalid grid config")
        for lo, hi in (self.x_range, self.y_range, self.z_range):
            if hi <= lo:
                raise ValueError("empty range")

    @property
    def nx(self):
        return math.ceil((self.x_range[1] - self.x_range[0]) / self.voxel_xy)

    @property
    def ny(self):
        return math.ceil((self.y_range[1] - self.y_range[0]) / self.voxel_xy)

    @property
    def nz(self):
        return math.ceil((self.z_range[1] - self.z_range[0]) / self.voxel_z)


@dataclass
class Voxel:
    coord: tuple  # (ix, iy, iz)
    features: np.ndarray  # [n, 13], last three columns are center offsets
    source: np.ndarray  # [n] SRC_* flags


@dataclass
class SparseTensor:
    """Active sites (lexicographically sorted, unique) with their features."""

    coords: np.ndarray  # [K, 3] int
    features: object  # [K, C] array or autodiff Tensor

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)

    def __len__(self):
        return len(self.coords)


def voxel_center(coord, cfg: GridConfig):
    ix, iy, iz = coord
    return np.array([
        cfg.x_range[0] + (ix + 0.5) * cfg.voxel_xy,
        cfg.y_range[0] + (iy + 0.5) * cfg.voxel_xy,
        cfg.z_range[0] + (iz + 0.5) * cfg.voxel_z,
    ])


def voxelize(cloud: FusedCloud, cfg: GridConfig):
    """Partition a fused cloud into voxels, sorted by coordinate.

    Points outside the half-open ranges are discarded. Offsets are taken
    from the voxel center. Within a voxel, points keep their original
    relative order.
    """
    xyz = cloud.xyz
    inside = (
        (xyz[:, 0] >= cfg.x_range[0]) & (xyz[:, 0] < cfg.x_range[1])
        & (xyz[:, 1] >= cfg.y_range[0]) & (xyz[:, 1] < cfg.y_range[1])
        & (xyz[:, 2] >= cfg.z_range[0]) & (xyz[:, 2] < cfg.z_range[1])
    )
    feats = cloud.features[inside]
    source = cloud.source[inside]
    if len(feats) == 0:
        return []
    ix = np.floor((feats[:, 0] - cfg.x_range[0]) / cfg.voxel_xy).astype(np.int64)
    iy = np.floor((feats[:, 1] - cfg.y_range[0]) / cfg.voxel_xy).astype(np.int64)
    iz = np.floor((feats[:, 2] - cfg.z_range[0]) / cfg.voxel_z).astype(np.int64)
    # float rounding at the upper edge can push an in-range point one cell over
    ix = np.minimum(ix, cfg.nx - 1)
    iy = np.minimum(iy, cfg.ny - 1)
    iz = np.minimum(iz, cfg.nz - 1)
    coords = np.stack([ix, iy, iz], axis=1)
    order = np.lexsort((np.arange(len(feats)), iz, iy, ix))
    coords = coords[order]
    feats = feats[order]
    source = source[order]

    voxels = []
    boundaries = np.nonzero(np.any(np.diff(coords, axis=0) != 0, axis=1))[0] + 1
    for chunk, fchunk, schunk in zip(
        np.split(coords, boundaries), np.split(feats, boundaries), np.split(source, boundaries)
    ):
        coord = tuple(int(c) for c in chunk[0])
        vf = np.zeros((len(fchunk), VOXEL_DIM))
        vf[:, :FUSED_DIM] = fchunk
        vf[:, FUSED_DIM:] = fchunk[:, :3] - voxel_center(coord, cfg)
        voxels.append(Voxel(coord, vf, schunk.copy()))
    return voxels


def cap_voxel(v: Voxel, rng: np.random.Generator, max_points: int = 40) -> Voxel:
    """Enforce the per-voxel point cap, keeping radar points preferentially.

    Radar points are all retained; the remaining slots are filled by uniform
    sampling without replacement from the non-radar points. If radar alone
    exceeds the cap, radar points are sampled uniformly.
    """
    n = len(v.features)
    if n <= max_points:
        return v
    radar_idx = np.nonzero(v.source == SRC_RADAR)[0]
    other_idx = np.nonzero(v.source != SRC_RADAR)[0]
    if len(radar_idx) >= max_points:
        keep = rng.choice(radar_idx, size=max_points, replace=False)
    else:
        slots = max_points - len(radar_idx)
        sampled = rng.choice(other_idx, size=slots, replace=False)
        keep = np.concatenate([radar_idx, sampled])
    keep = np.sort(keep)
    return Voxel(v.coord, v.features[keep], v.source[keep])


def to_sparse(voxel_features, coords) -> SparseTensor:
    """Assemble a lexicographically sorted sparse tensor from voxel rows."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    feats = np.asarray(voxel_features, dtype=np.float64)
    if len(coords) != len(feats):
        raise ValueError("coords and features must align")
    if len(coords):
        uniq = np.unique(coords, axis=0)
        if len(uniq) != len(coords):
            raise ValueError("duplicate coords")
        order = np.lexsort((coords[:, 2], coords[:, 1], coords[:, 0]))
        coords = coords[order]
        feats = feats[order]
    return SparseTensor(coords, feats)


def _coord_seed(global_seed: int, coord) -> int:
    ix, iy, iz = coord
    h = (ix * 73856093) ^ (iy * 19349663) ^ (iz * 83492791)
    return (int(global_seed) ^ (h & 0x7FFFFFFF)) & 0xFFFFFFFF


@dataclass
class VoxelBatch:
    """Padded network input: coords, [K, P, 13] features, [K, P] mask."""

    coords: np.ndarray
    features: np.ndarray
    mask: np.ndarray


def build_voxel_batch(cloud: FusedCloud, cfg: GridConfig, seed: int = 0) -> VoxelBatch:
    """Full voxelize -> cap -> pad pipeline, byte-deterministic per seed.

    Capping uses a per-voxel generator seeded from (seed, coord) so the
    result does not depend on voxel iteration order.
    """
    voxels = voxelize(cloud, cfg)
    capped = [
        cap_voxel(v, np.random.default_rng(_coord_seed(seed, v.coord)), cfg.max_points)
        for v in voxels
    ]
    K = len(capped)
    P = cfg.max_points
    coords = np.zeros((K, 3), dtype=np.int64)
    feats = np.zeros((K, P, VOXEL_DIM))
    mask = np.zeros((K, P), dtype=bool)
    for k, v in enumerate(capped):
        coords[k] = v.coord
        n = len(v.features)
        feats[k, :n] = v.features
        mask[k, :n] = True
    return VoxelBatch(coords, feats, mask)
