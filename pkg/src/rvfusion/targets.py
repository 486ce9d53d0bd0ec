"""Anchor generation, positive/negative/ignore assignment, box/yaw codecs.

Anchors live on the BEV cell grid with two yaw parameterizations (0 and
pi/2). The yaw target is the sine of the anchor-relative angle difference
plus a half-space direction bin, which keeps the regression target
continuous across the [-pi, pi) wrap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geom import BBox3D, bev_iou, wrap_angle
from .voxel import GridConfig

ANCHOR_YAWS = (0.0, math.pi / 2)
DEFAULT_ANCHOR_DIMS = (1.9, 4.6, 1.7)  # w, l, h car prior
DEFAULT_ANCHOR_Z = -1.0

LABEL_POSITIVE = 1
LABEL_NEGATIVE = 0
LABEL_IGNORE = -1


def anchor_grid(cfg: GridConfig, anchor_dims=DEFAULT_ANCHOR_DIMS, anchor_z=DEFAULT_ANCHOR_Z):
    """Anchor parameters on the BEV grid: array [ny, nx, 2, 7] of
    (x, y, z, w, l, h, yaw)."""
    xs = cfg.x_range[0] + (np.arange(cfg.nx) + 0.5) * cfg.voxel_xy
    ys = cfg.y_range[0] + (np.arange(cfg.ny) + 0.5) * cfg.voxel_xy
    w, l, h = anchor_dims
    out = np.zeros((cfg.ny, cfg.nx, 2, 7))
    out[..., 0] = xs[None, :, None]
    out[..., 1] = ys[:, None, None]
    out[..., 2] = anchor_z
    out[..., 3] = w
    out[..., 4] = l
    out[..., 5] = h
    out[..., 6] = np.array(ANCHOR_YAWS)[None, None, :]
    return out


def generate_anchors(cfg: GridConfig, anchor_dims=DEFAULT_ANCHOR_DIMS,
                     anchor_z=DEFAULT_ANCHOR_Z):
    """Flat list of anchors as BBox3D, row-major over (iy, ix, yaw)."""
    grid = anchor_grid(cfg, anchor_dims, anchor_z)
    flat = grid.reshape(-1, 7)
    return [BBox3D(*row) for row in flat]


def encode_yaw(theta_gt: float, theta_a: float):
    """Yaw target: (sin of the angle difference, direction bin).

    The bin is 1 when the wrapped difference lies in [-pi/2, pi/2)."""
    theta_d = theta_gt - theta_a
    e_theta = math.sin(theta_d)
    wrapped = (theta_d + math.pi) % (2 * math.pi) - math.pi
    c_dir = 1 if -math.pi / 2 <= wrapped < math.pi / 2 else 0
    return e_theta, c_dir


def decode_yaw(e_theta: float, dir_prob: float, theta_a: float) -> float:
    s = min(max(e_theta, -1.0), 1.0)
    if dir_prob >= 0.5:
        return wrap_angle(theta_a + math.asin(s))
    return wrap_angle(theta_a + math.pi - math.asin(s))


def encode_regression(gt: BBox3D, anchor: BBox3D) -> np.ndarray:
    """Seven regression targets of gt relative to an anchor."""
    if min(gt.w, gt.l, gt.h, anchor.w, anchor.l, anchor.h) <= 0:
        raise ValueError("nonpositive box dimensions")
    d_a = math.hypot(anchor.w, anchor.l)
    e_theta, _ = encode_yaw(gt.yaw, anchor.yaw)
    return np.array([
        (gt.x - anchor.x) / d_a,
        (gt.y - anchor.y) / d_a,
        (gt.z - anchor.z) / anchor.h,
        math.log(gt.w / anchor.w),
        math.log(gt.l / anchor.l),
        math.log(gt.h / anchor.h),
        e_theta,
    ])


def decode_box(anchor: BBox3D, reg, dir_prob: float) -> BBox3D:
    """Invert encode_regression given the direction-bin probability."""
    reg = np.asarray(reg, dtype=float)
    if not np.all(np.isfinite(reg)):
        raise ValueError("non-finite regression values")
    d_a = math.hypot(anchor.w, anchor.l)
    return BBox3D(
        x=anchor.x + reg[0] * d_a,
        y=anchor.y + reg[1] * d_a,
        z=anchor.z + reg[2] * anchor.h,
        w=anchor.w * math.exp(reg[3]),
        l=anchor.l * math.exp(reg[4]),
        h=anchor.h * math.exp(reg[5]),
        yaw=decode_yaw(reg[6], dir_prob, anchor.yaw),
    )


@dataclass
class TargetAssignment:
    """Per-anchor labels and targets on the [ny, nx, 2] anchor grid."""

    labels: np.ndarray  # int, LABEL_*
    matched_gt: np.ndarray  # int, -1 where not positive
    reg_targets: np.ndarray  # [ny, nx, 2, 7], zero where not positive
    dir_targets: np.ndarray  # float {0, 1}, zero where not positive

    @property
    def num_positive(self):
        return int(np.sum(self.labels == LABEL_POSITIVE))


def match_anchors(cfg: GridConfig, gt_boxes, iou_pos=0.35, iou_neg=0.30,
                  dist_pos=0.5, anchor_dims=DEFAULT_ANCHOR_DIMS,
                  anchor_z=DEFAULT_ANCHOR_Z, yaw_mode="sine") -> TargetAssignment:
    """Assign every anchor a positive/negative/ignore label and targets.

    Positive: IoU >= iou_pos or center distance <= dist_pos. Negative:
    IoU < iou_neg and distance > dist_pos. Otherwise ignore. The best-IoU
    anchor of each gt is forced positive (when that IoU is > 0). Positives
    match their highest-IoU gt, ties broken by nearer center then lower
    gt index.

    yaw_mode "sine" fills the 7th regression target with sin(theta_d) and
    the direction bin; "simple" regresses the wrapped difference directly
    and zeroes the direction target.
    """
    if iou_neg > iou_pos:
        raise ValueError("iou_neg must be <= iou_pos")
    grid = anchor_grid(cfg, anchor_dims, anchor_z)
    ny, nx = grid.shape[:2]
    flat = grid.reshape(-1, 7)
    n_anchor = len(flat)
    n_gt = len(gt_boxes)

    labels = np.full(n_anchor, LABEL_NEGATIVE, dtype=np.int64)
    matched = np.full(n_anchor, -1, dtype=np.int64)
    reg_targets = np.zeros((n_anchor, 7))
    dir_targets = np.zeros(n_anchor)

    if n_gt:
        ax = flat[:, 0]
        ay = flat[:, 1]
        gx = np.array([g.x for g in gt_boxes])
        gy = np.array([g.y for g in gt_boxes])
        dist = np.hypot(ax[:, None] - gx[None, :], ay[:, None] - gy[None, :])

        # IoU only where the BEV footprints can possibly overlap
        iou = np.zeros((n_anchor, n_gt))
        a_diag = 0.5 * math.hypot(anchor_dims[0], anchor_dims[1])
        anchors_cache = {}
        for j, g in enumerate(gt_boxes):
            g_diag = 0.5 * math.hypot(g.w, g.l)
            cand = np.nonzero(dist[:, j] <= a_diag + g_diag)[0]
            for i in cand:
                if i not in anchors_cache:
                    anchors_cache[i] = BBox3D(*flat[i])
                iou[i, j] = bev_iou(anchors_cache[i], g)

        max_iou = iou.max(axis=1)
        min_dist = dist.min(axis=1)
        pos = (max_iou >= iou_pos) | (min_dist <= dist_pos)
        neg = (max_iou < iou_neg) & (min_dist > dist_pos)
        labels[:] = LABEL_IGNORE
        labels[neg] = LABEL_NEGATIVE
        labels[pos] = LABEL_POSITIVE

        # every gt with any overlap keeps at least its best anchor
        for j in range(n_gt):
            if iou[:, j].max() > 0:
                best = int(np.argmax(iou[:, j]))
                labels[best] = LABEL_POSITIVE

        # match each positive: highest IoU, then nearer center, then index
        for i in np.nonzero(labels == LABEL_POSITIVE)[0]:
            order = np.lexsort((np.arange(n_gt), dist[i], -iou[i]))
            j = int(order[0])
            matched[i] = j
            anchor = anchors_cache.get(int(i)) or BBox3D(*flat[i])
            g = gt_boxes[j]
            reg = encode_regression(g, anchor)
            if yaw_mode == "simple":
                reg[6] = wrap_angle(g.yaw - anchor.yaw)
            else:
                _, c_dir = encode_yaw(g.yaw, anchor.yaw)
                dir_targets[i] = c_dir
            reg_targets[i] = reg

    return TargetAssignment(
        labels.reshape(ny, nx, 2),
        matched.reshape(ny, nx, 2),
        reg_targets.reshape(ny, nx, 2, 7),
        dir_targets.reshape(ny, nx, 2),
    )
