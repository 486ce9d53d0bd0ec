"""Oriented 3D box geometry: rotated BEV IoU, NMS, rigid transforms."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class BBox3D:
    """Axis-up oriented box. w is the extent across the heading, l along it."""

    x: float
    y: float
    z: float
    w: float
    l: float
    h: float
    yaw: float

    def __post_init__(self):
        if not (self.w > 0 and self.l > 0 and self.h > 0):
            raise ValueError(f"box dims must be positive, got w={self.w} l={self.l} h={self.h}")
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))

    def bev_corners(self) -> np.ndarray:
        """4x2 array of BEV corner coordinates, counter-clockwise."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        # local frame: l along heading (x'), w across (y')
        dx = self.l / 2.0
        dy = self.w / 2.0
        local = np.array([[dx, dy], [-dx, dy], [-dx, -dy], [dx, -dy]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.x, self.y])


@dataclass(frozen=True)
class Pose:
    """Yaw-only rigid transform in the ground plane plus 3D translation."""

    tx: float = 0.0
    ty: float = 0.0
    tz: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))

    def inverse(self) -> "Pose":
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        # p' = R p + t  =>  p = R^T (p' - t)
        return Pose(
            tx=-(c * self.tx + s * self.ty),
            ty=-(-s * self.tx + c * self.ty),
            tz=-self.tz,
            yaw=-self.yaw,
        )

    def compose(self, other: "Pose") -> "Pose":
        """Pose applying `other` first, then self."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return Pose(
            tx=self.tx + c * other.tx - s * other.ty,
            ty=self.ty + s * other.tx + c * other.ty,
            tz=self.tz + other.tz,
            yaw=wrap_angle(self.yaw + other.yaw),
        )


def wrap_angle(theta):
    """Wrap an angle (scalar or array) into [-pi, pi)."""
    theta = np.asarray(theta, dtype=float)
    if not np.all(np.isfinite(theta)):
        raise ValueError("angle must be finite")
    wrapped = np.mod(theta + np.pi, 2.0 * np.pi) - np.pi
    # mod can land exactly on +pi for inputs like -pi - eps due to rounding
    wrapped = np.where(wrapped >= np.pi, wrapped - 2.0 * np.pi, wrapped)
    if wrapped.ndim == 0:
        return float(wrapped)
    return wrapped


def _polygon_area(poly: np.ndarray) -> float:
    """Shoelace area of a 2D polygon (positive for CCW orientation)."""
    if len(poly) < 3:
        return 0.0
    x = poly[:, 0]
    y = poly[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clipping of `subject` against convex CCW `clip`."""
    output = list(subject)
    n = len(clip)
    for i in range(n):
        if not output:
            return np.empty((0, 2))
        a = clip[i]
        b = clip[(i + 1) % n]
        edge = b - a
        input_pts = output
        output = []
        for j in range(len(input_pts)):
            p = input_pts[j]
            q = input_pts[(j + 1) % len(input_pts)]
            p_in = edge[0] * (p[1] - a[1]) - edge[1] * (p[0] - a[0]) >= 0
            q_in = edge[0] * (q[1] - a[1]) - edge[1] * (q[0] - a[0]) >= 0
            if p_in:
                output.append(p)
                if not q_in:
                    output.append(_edge_intersect(p, q, a, b))
            elif q_in:
                output.append(_edge_intersect(p, q, a, b))
    return np.array(output) if output else np.empty((0, 2))


def _edge_intersect(p, q, a, b):
    d1 = q - p
    d2 = b - a
    denom = d1[0] * d2[1] - d1[1] * d2[0]
    t = ((a[0] - p[0]) * d2[1] - (a[1] - p[1]) * d2[0]) / denom
    return p + t * d1


def bev_iou(a: BBox3D, b: BBox3D) -> float:
    """Intersection over union of the two boxes' BEV rotated rectangles."""
    area_a = a.w * a.l
    area_b = b.w * b.l
    if area_a <= 0 or area_b <= 0:
        raise ValueError("degenerate box in bev_iou")
    ca = a.bev_corners()
    cb = b.bev_corners()
    inter_poly = _clip_polygon(ca, cb)
    inter = abs(_polygon_area(inter_poly))
    union = area_a + area_b - inter
    return min(max(inter / union, 0.0), 1.0)


def center_distance(a: BBox3D, b: BBox3D) -> float:
    """Euclidean distance of the BEV (x, y) centers; z is ignored."""
    return math.hypot(a.x - b.x, a.y - b.y)


def nms(boxes, scores, iou_threshold: float):
    """Greedy NMS on BEV rotated IoU. Returns kept indices (input order ties
    broken toward the lower index)."""
    if len(boxes) != len(scores):
        raise ValueError("boxes and scores must align")
    order = sorted(range(len(boxes)), key=lambda i: (-scores[i], i))
    kept = []
    suppressed = [False] * len(boxes)
    for i in order:
        if suppressed[i]:
            continue
        kept.append(i)
        for j in order:
            if j == i or suppressed[j]:
                continue
            if bev_iou(boxes[i], boxes[j]) >= iou_threshold:
                suppressed[j] = True
    return kept


def transform_points(points: np.ndarray, pose: Pose) -> np.ndarray:
    """Rotate Nx3 points by pose.yaw about z, then translate."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    c, s = math.cos(pose.yaw), math.sin(pose.yaw)
    out = np.empty_like(pts)
    out[:, 0] = c * pts[:, 0] - s * pts[:, 1] + pose.tx
    out[:, 1] = s * pts[:, 0] + c * pts[:, 1] + pose.ty
    out[:, 2] = pts[:, 2] + pose.tz
    return out


def transform_box(box: BBox3D, pose: Pose) -> BBox3D:
    """Apply a pose to a box (center moves, yaw adds, dims unchanged)."""
    center = transform_points(np.array([[box.x, box.y, box.z]]), pose)[0]
    return BBox3D(center[0], center[1], center[2], box.w, box.l, box.h,
                  wrap_angle(box.yaw + pose.yaw))
