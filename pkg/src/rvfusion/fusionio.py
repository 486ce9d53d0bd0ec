"""Sensor point representations and the early-fusion preprocessing chain.

Cloud layouts (float64 row-per-point arrays):
    lidar:  [N, 4]  x, y, z, i
    radar:  [N, 6]  x, y, z, rcs, vx, vy
    fused:  [N, 10] x, y, z, i, r, g, b, rcs, vx, vy  (+ per-point source flag)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .geom import Pose, transform_points

# source flags for fused points
SRC_LIDAR = 0
SRC_RADAR = 1
SRC_DENSIFIED = 2

FUSED_DIM = 10


@dataclass
class CameraFrame:
    """Pinhole camera with yaw-only mounting pose in the ego frame.

    The camera looks along its mount +x axis; image u grows to the right
    (ego -y at zero yaw), v grows downward (ego -z).
    """

    width: int
    height: int
    rgb: np.ndarray  # [H, W, 3] in [0, 1]
    fx: float
    fy: float
    cx: float
    cy: float
    pose: Pose = field(default_factory=Pose)

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        if self.rgb.shape != (self.height, self.width, 3):
            raise ValueError("rgb shape must be (height, width, 3)")


@dataclass
class FusedCloud:
    """Fused multi-modal point cloud: feature rows plus a source flag each."""

    features: np.ndarray  # [N, 10]
    source: np.ndarray  # [N] int, SRC_* flags
    lag: np.ndarray | None = None  # [N] seconds behind the reference sweep

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64).reshape(-1, FUSED_DIM)
        self.source = np.asarray(self.source, dtype=np.int64).reshape(-1)
        if len(self.features) != len(self.source):
            raise ValueError("features and source must align")

    def __len__(self):
        return len(self.features)

    @property
    def xyz(self):
        return self.features[:, :3]

    @staticmethod
    def empty():
        return FusedCloud(np.empty((0, FUSED_DIM)), np.empty(0, dtype=np.int64))

    @staticmethod
    def concatenate(clouds):
        clouds = list(clouds)
        if not clouds:
            return FusedCloud.empty()
        lag = None
        if all(c.lag is not None for c in clouds):
            lag = np.concatenate([c.lag for c in clouds])
        return FusedCloud(
            np.concatenate([c.features for c in clouds]),
            np.concatenate([c.source for c in clouds]),
            lag,
        )


@dataclass
class Sweep:
    """One sensor scan with the ego pose it was captured from."""

    cloud: np.ndarray
    ego_pose: Pose
    timestamp: float


def _to_camera_frame(points, cam: CameraFrame):
    """Ego-frame points -> camera coordinates (x right, y down, z forward)."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    local = transform_points(pts, cam.pose.inverse())
    cam_pts = np.empty_like(local)
    cam_pts[:, 0] = -local[:, 1]
    cam_pts[:, 1] = -local[:, 2]
    cam_pts[:, 2] = local[:, 0]
    return cam_pts


def project_to_image(points, cam: CameraFrame):
    """Pinhole projection. Returns (u, v, valid) arrays.

    valid is False for points at or behind the image plane and for
    projections outside [0, W) x [0, H).
    """
    cam_pts = _to_camera_frame(points, cam)
    z = cam_pts[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.fx * cam_pts[:, 0] / z + cam.cx
        v = cam.fy * cam_pts[:, 1] / z + cam.cy
    valid = (z > 1e-9) & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    u = np.where(valid, u, 0.0)
    v = np.where(valid, v, 0.0)
    return u, v, valid


def colorize(lidar: np.ndarray, cam: CameraFrame) -> FusedCloud:
    """Attach nearest-pixel RGB to each lidar point.

    Points that do not project into the image are kept with zero color.
    Radar-slot features (rcs, vx, vy) are zero for lidar-sourced points.
    """
    lidar = np.asarray(lidar, dtype=np.float64).reshape(-1, 4)
    n = len(lidar)
    feats = np.zeros((n, FUSED_DIM))
    feats[:, :4] = lidar
    if n:
        u, v, valid = project_to_image(lidar[:, :3], cam)
        iu = np.clip(u.astype(np.intp), 0, cam.width - 1)
        iv = np.clip(v.astype(np.intp), 0, cam.height - 1)
        feats[valid, 4:7] = cam.rgb[iv[valid], iu[valid]]
    return FusedCloud(feats, np.full(n, SRC_LIDAR, dtype=np.int64))


def fuse_radar(radar: np.ndarray) -> FusedCloud:
    """Lift a radar cloud into fused-point rows (zero intensity and color)."""
    radar = np.asarray(radar, dtype=np.float64).reshape(-1, 6)
    n = len(radar)
    feats = np.zeros((n, FUSED_DIM))
    feats[:, :3] = radar[:, :3]
    feats[:, 7:10] = radar[:, 3:6]
    return FusedCloud(feats, np.full(n, SRC_RADAR, dtype=np.int64))


def radial_to_cartesian(rng: float, azimuth: float, v_r: float):
    """Decompose a radial velocity at a given bearing into (vx, vy)."""
    if not rng > 0:
        raise ValueError("range must be positive")
    return v_r * math.cos(azimuth), v_r * math.sin(azimuth)


def accumulate_sweeps(sweeps, n: int, kind: str = "lidar"):
    """Concatenate the last n sweeps in the latest sweep's ego frame.

    Each output row keeps its sweep's features; positions are ego-motion
    compensated, and for radar the (vx, vy) columns are rotated into the
    latest frame. Returns (cloud, lag) with lag in seconds per point.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    sweeps = list(sweeps)
    if not sweeps:
        raise ValueError("no sweeps")
    ts = [s.timestamp for s in sweeps]
    if any(b <= a for a, b in zip(ts, ts[1:])):
        raise ValueError("sweep timestamps must be strictly increasing")
    used = sweeps[-n:]
    latest = used[-1]
    inv_latest = latest.ego_pose.inverse()
    chunks = []
    lags = []
    for s in used:
        cloud = np.array(s.cloud, dtype=np.float64)
        if len(cloud):
            rel = inv_latest.compose(s.ego_pose)
            cloud[:, :3] = transform_points(cloud[:, :3], rel)
            if kind == "radar":
                c, si = math.cos(rel.yaw), math.sin(rel.yaw)
                vx = cloud[:, 4].copy()
                vy = cloud[:, 5].copy()
                cloud[:, 4] = c * vx - si * vy
                cloud[:, 5] = si * vx + c * vy
        chunks.append(cloud)
        lags.append(np.full(len(cloud), latest.timestamp - s.timestamp))
    return np.concatenate(chunks), np.concatenate(lags)


# morphology footprints: 5x5 diamond for dilation, 5x5 full for closing
_DIAMOND_5 = (np.add.outer(np.abs(np.arange(-2, 3)), np.abs(np.arange(-2, 3))) <= 2)
_FULL_5 = np.ones((5, 5), dtype=bool)

_INV_BASE = 100.0  # depth inversion pivot; beyond any desk-scale range


def depth_complete(lidar: np.ndarray, cam: CameraFrame) -> FusedCloud:
    """Densify the lidar depth image and back-project the filled pixels.

    Sparse depth image from projection, inverted so nearer wins under max
    filtering, dilated with a 5x5 diamond, closed with a 5x5 full kernel,
    re-inverted and back-projected. Original lidar pixels keep their own
    depth. All output points are flagged densified and colorized.
    """
    lidar = np.asarray(lidar, dtype=np.float64).reshape(-1, 4)
    if len(lidar) == 0:
        return FusedCloud.empty()
    cam_pts = _to_camera_frame(lidar[:, :3], cam)
    u, v, valid = project_to_image(lidar[:, :3], cam)
    iu = u[valid].astype(np.intp)
    iv = v[valid].astype(np.intp)
    depth = cam_pts[valid, 2]
    intens = lidar[valid, 3]

    H, W = cam.height, cam.width
    inv = np.zeros((H, W))
    ii = np.zeros((H, W))
    # nearest return wins when several points land in one pixel
    order = np.argsort(-depth)  # farthest first, nearest written last
    inv[iv[order], iu[order]] = _INV_BASE - depth[order]
    ii[iv[order], iu[order]] = intens[order]
    occupied = inv > 0
    if not occupied.any():
        return FusedCloud.empty()
    orig_inv = inv[occupied]

    inv = ndimage.grey_dilation(inv, footprint=_DIAMOND_5, mode="constant", cval=0.0)
    inv = ndimage.grey_erosion(
        ndimage.grey_dilation(inv, footprint=_FULL_5, mode="constant", cval=0.0),
        footprint=_FULL_5, mode="constant", cval=_INV_BASE)
    inv[inv < 0] = 0.0
    inv[occupied] = orig_inv  # measured pixels are authoritative

    filled = inv > 0
    fv, fu = np.nonzero(filled)
    d = _INV_BASE - inv[filled]
    # back-project through the pinhole model into the ego frame
    xc = (fu + 0.0 - cam.cx) / cam.fx * d
    yc = (fv + 0.0 - cam.cy) / cam.fy * d
    local = np.stack([d, -xc, -yc], axis=1)  # camera -> mount frame
    ego = transform_points(local, cam.pose)

    n = len(ego)
    feats = np.zeros((n, FUSED_DIM))
    feats[:, :3] = ego
    feats[:, 3] = np.where(occupied[filled], ii[filled], 0.0)
    feats[:, 4:7] = cam.rgb[fv, fu]
    return FusedCloud(feats, np.full(n, SRC_DENSIFIED, dtype=np.int64))
