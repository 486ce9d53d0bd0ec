"""Training loop, data augmentation, inference post-processing.

A training sample is a (FusedCloud, gt boxes) pair built by the fusion
preprocessing chain; batches are single frames. Optimization is
adaptive-moment gradient descent with bias correction, fully seeded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import ParamStore, _sigmoid
from .fusionio import (FusedCloud, SRC_RADAR, accumulate_sweeps, colorize,
                       depth_complete, fuse_radar, Sweep)
from .geom import BBox3D, nms, wrap_angle
from .losses import LossWeights, total_loss
from .net import NetConfig, build_params, rvfnet_forward
from .targets import (DEFAULT_ANCHOR_DIMS, DEFAULT_ANCHOR_Z, anchor_grid,
                      decode_box, match_anchors)
from .voxel import GridConfig, build_voxel_batch
from . import evalmetrics

# feature column indices in the fused layout
_COL_RGB = slice(4, 7)
_COL_RADAR = slice(7, 10)


@dataclass(frozen=True)
class AugmentRanges:
    rotation: float = math.pi / 4  # U(-r, r)
    translation_sigma: float = 0.2  # per-axis N(0, s), z excluded
    scale_low: float = 0.95
    scale_high: float = 1.05


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    augment: bool = True
    aug_ranges: AugmentRanges = field(default_factory=AugmentRanges)
    score_threshold: float = 0.3
    nms_iou: float = 0.1
    pre_nms_top_k: int = 100  # keep this many best anchors before NMS
    sweeps: int = 3
    loss_weights: LossWeights = field(default_factory=LossWeights)
    grid: GridConfig = field(default_factory=GridConfig)
    net: NetConfig = field(default_factory=NetConfig)
    modalities: tuple = ("lidar", "rgb", "radar")
    yaw_mode: str = "sine"  # "sine" | "simple"
    anchor_dims: tuple = DEFAULT_ANCHOR_DIMS
    anchor_z: float = DEFAULT_ANCHOR_Z
    iou_pos: float = 0.35
    iou_neg: float = 0.30
    dist_pos: float = 0.5
    patience: int = 10
    val_interval: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not (0 <= self.score_threshold <= 1 and 0 <= self.nms_iou <= 1):
            raise ValueError("thresholds must lie in [0, 1]")


def preprocess_frame(scene_frames, idx: int, cfg: TrainConfig) -> tuple:
    """Fuse one frame (with sweep accumulation) into a network-ready cloud.

    Returns (FusedCloud, gt boxes inside the detection grid)."""
    frames = scene_frames[max(0, idx - cfg.sweeps + 1): idx + 1]
    current = frames[-1]
    lidar_sweeps = [Sweep(f.lidar, f.ego_pose, f.timestamp) for f in frames]
    radar_sweeps = [Sweep(f.radar, f.ego_pose, f.timestamp) for f in frames]
    lidar_acc, lidar_lag = accumulate_sweeps(lidar_sweeps, cfg.sweeps, "lidar")
    radar_acc, radar_lag = accumulate_sweeps(radar_sweeps, cfg.sweeps, "radar")

    parts = []
    lags = []
    if "lidar" in cfg.modalities:
        fused = colorize(lidar_acc, current.camera)
        parts.append(fused)
        lags.append(lidar_lag)
    if "depth" in cfg.modalities:
        dense = depth_complete(current.lidar, current.camera)
        parts.append(dense)
        lags.append(np.zeros(len(dense)))
    if "radar" in cfg.modalities:
        parts.append(fuse_radar(radar_acc))
        lags.append(radar_lag)
    if parts:
        cloud = FusedCloud.concatenate(parts)
        cloud.lag = np.concatenate(lags)
    else:
        cloud = FusedCloud.empty()

    # ablation masks zero feature columns without changing the layout
    if "rgb" not in cfg.modalities:
        cloud.features[:, _COL_RGB] = 0.0
    if "radar" not in cfg.modalities:
        cloud.features[:, _COL_RADAR] = 0.0

    g = cfg.grid
    gts = [b for b in current.gt_boxes
           if g.x_range[0] <= b.x < g.x_range[1]
           and g.y_range[0] <= b.y < g.y_range[1]]
    return cloud, gts


def augment(cloud: FusedCloud, gt_boxes, rng: np.random.Generator,
            ranges: AugmentRanges = AugmentRanges()):
    """One global rotation/translation/scale draw applied to points, boxes,
    and radar velocity vectors (velocities get rotation and scale only)."""
    ang = rng.uniform(-ranges.rotation, ranges.rotation)
    tx, ty = rng.normal(0.0, ranges.translation_sigma, 2)
    scale = rng.uniform(ranges.scale_low, ranges.scale_high)
    c, s = math.cos(ang), math.sin(ang)

    f = cloud.features.copy()
    x, y = f[:, 0].copy(), f[:, 1].copy()
    f[:, 0] = scale * (c * x - s * y) + tx
    f[:, 1] = scale * (s * x + c * y) + ty
    f[:, 2] *= scale
    vx, vy = f[:, 8].copy(), f[:, 9].copy()
    f[:, 8] = scale * (c * vx - s * vy)
    f[:, 9] = scale * (s * vx + c * vy)
    new_cloud = FusedCloud(f, cloud.source.copy(),
                           None if cloud.lag is None else cloud.lag.copy())

    new_boxes = []
    for b in gt_boxes:
        bx = scale * (c * b.x - s * b.y) + tx
        by = scale * (s * b.x + c * b.y) + ty
        new_boxes.append(BBox3D(bx, by, b.z * scale, b.w * scale,
                                b.l * scale, b.h * scale,
                                wrap_angle(b.yaw + ang)))
    return new_cloud, new_boxes


class Adam:
    """Adaptive-moment optimizer with bias correction."""

    def __init__(self, params: ParamStore, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}

    def step(self):
        self.t += 1
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            m_hat = self.m[k] / (1 - self.beta1 ** self.t)
            v_hat = self.v[k] / (1 - self.beta2 ** self.t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _targets_for(gts, cfg: TrainConfig):
    return match_anchors(cfg.grid, gts, cfg.iou_pos, cfg.iou_neg, cfg.dist_pos,
                         cfg.anchor_dims, cfg.anchor_z, cfg.yaw_mode)


def train_step(params, sample, cfg: TrainConfig, opt: Adam, voxel_seed: int):
    cloud, gts = sample
    batch = build_voxel_batch(cloud, cfg.grid, seed=voxel_seed)
    out = rvfnet_forward(params, batch, cfg.net, cfg.grid)
    tgt = _targets_for(gts, cfg)
    loss, breakdown = total_loss(out, tgt, cfg.loss_weights, cfg.yaw_mode)
    if not np.isfinite(loss.data):
        raise FloatingPointError(f"training diverged: loss={float(loss.data)}")
    params.zero_grad()
    loss.backward()
    opt.step()
    return breakdown


@dataclass
class TrainResult:
    params: ParamStore
    best_state: dict
    curves: list  # per-epoch dicts: epoch, loss, val_ap
    best_val_ap: float
    best_epoch: int


def train(train_samples, cfg: TrainConfig, val_samples=None) -> TrainResult:
    """Seeded training over (cloud, gts) samples with optional validation.

    Frames without any in-range gt are skipped. Tracks the best validation
    mean AP and stops early after `patience` non-improving epochs."""
    samples = [s for s in train_samples if len(s[1]) > 0]
    if not samples:
        raise ValueError("no training frames with ground truth")
    params = build_params(replace(cfg.net, init_seed=cfg.seed), cfg.grid)
    opt = Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    rng = np.random.default_rng(cfg.seed + 1)

    best_val = -1.0
    best_epoch = -1
    best_state = params.state_dict()
    curves = []
    stall = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(samples))
        losses = []
        for j in order:
            cloud, gts = samples[j]
            if cfg.augment:
                cloud, gts = augment(cloud, gts, rng, cfg.aug_ranges)
            bd = train_step(params, (cloud, gts), cfg, opt,
                            voxel_seed=cfg.seed * 100003 + int(j))
            losses.append(bd["total"])
        row = {"epoch": epoch, "loss": float(np.mean(losses)),
               "val_ap": float("nan")}
        if val_samples and (epoch % cfg.val_interval == 0
                            or epoch == cfg.epochs - 1):
            row["val_ap"] = evaluate(params, val_samples, cfg).mean_ap
            if row["val_ap"] > best_val:
                best_val = row["val_ap"]
                best_epoch = epoch
                best_state = params.state_dict()
                stall = 0
            else:
                stall += 1
        curves.append(row)
        if val_samples and stall >= cfg.patience:
            break
    if not val_samples:
        best_state = params.state_dict()
        best_epoch = cfg.epochs - 1
    return TrainResult(params, best_state, curves, best_val, best_epoch)


def infer(params: ParamStore, cloud: FusedCloud, cfg: TrainConfig):
    """Detections as (BBox3D, score), score-descending, after NMS."""
    batch = build_voxel_batch(cloud, cfg.grid, seed=0)
    out = rvfnet_forward(params, batch, cfg.net, cfg.grid)
    cls_prob = _sigmoid(out.cls.data)
    dir_prob = _sigmoid(out.dir.data)
    reg = out.reg.data
    anchors = anchor_grid(cfg.grid, cfg.anchor_dims, cfg.anchor_z)
    sel = np.argwhere(cls_prob >= cfg.score_threshold)
    if len(sel) > cfg.pre_nms_top_k:
        # NMS is quadratic in rotated-IoU evaluations; cap the candidates
        picked = cls_prob[sel[:, 0], sel[:, 1], sel[:, 2]]
        order = np.argsort(-picked, kind="stable")[:cfg.pre_nms_top_k]
        sel = sel[order]
    boxes = []
    scores = []
    for iy, ix, a in sel:
        anchor = BBox3D(*anchors[iy, ix, a])
        r = reg[iy, ix, a]
        if cfg.yaw_mode == "simple":
            box = decode_box(anchor, np.concatenate([r[:6], [0.0]]), 1.0)
            box = replace(box, yaw=wrap_angle(anchor.yaw + r[6]))
        else:
            box = decode_box(anchor, r, dir_prob[iy, ix, a])
        boxes.append(box)
        scores.append(float(cls_prob[iy, ix, a]))
    if not boxes:
        return []
    keep = nms(boxes, scores, cfg.nms_iou)
    dets = [(boxes[i], scores[i]) for i in keep]
    dets.sort(key=lambda d: -d[1])
    return dets


def evaluate(params: ParamStore, samples, cfg: TrainConfig):
    """nuScenes-style evaluation of the detector over (cloud, gts) samples."""
    dets = []
    gts = []
    for fid, (cloud, frame_gts) in enumerate(samples):
        for box, score in infer(params, cloud, cfg):
            dets.append((box, score, fid))
        for b in frame_gts:
            gts.append((b, fid))
    return evalmetrics.average_precision(dets, gts)
