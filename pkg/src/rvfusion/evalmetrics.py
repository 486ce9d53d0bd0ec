"""Distance-threshold average precision and average orientation error.

AP follows the nuScenes-style recipe: greedy center-distance matching of
score-sorted detections, 101-point interpolated precision, operating
points below 10% recall or precision removed, and the remainder rescaled
so a perfect detector scores exactly 1.0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geom import wrap_angle

DIST_THRESHOLDS = (0.5, 1.0, 2.0, 4.0)
MIN_RECALL = 0.1
MIN_PRECISION = 0.1
N_RECALL_POINTS = 101


@dataclass
class EvalResult:
    ap_per_threshold: dict
    mean_ap: float
    aoe: float  # NaN when there are no true positives at 2 m
    aoe_tp_count: int
    pr_curves: dict = field(default_factory=dict)  # threshold -> (recall, precision)


def match_detections(dets, gts, dist_threshold):
    """Greedy matching of score-sorted detections to ground truths.

    dets: list of (BBox3D, score, frame_id); gts: list of (BBox3D,
    frame_id). Returns (tp flags per det, matched gt index or -1 per det).
    Each gt is matched at most once; a detection takes the nearest
    unmatched gt of the same frame within the threshold.
    """
    scores = [d[1] for d in dets]
    if any(b > a for a, b in zip(scores, scores[1:])):
        raise ValueError("detections must be sorted by descending score")
    used = [False] * len(gts)
    tp = np.zeros(len(dets), dtype=bool)
    matched = np.full(len(dets), -1, dtype=np.int64)
    for i, (box, _score, frame) in enumerate(dets):
        best_j = -1
        best_d = dist_threshold
        for j, (gbox, gframe) in enumerate(gts):
            if used[j] or gframe != frame:
                continue
            d = math.hypot(box.x - gbox.x, box.y - gbox.y)
            if d <= best_d:
                best_d = d
                best_j = j
        if best_j >= 0:
            used[best_j] = True
            tp[i] = True
            matched[i] = best_j
    return tp, matched


def _calc_ap(tp, n_gt):
    """Interpolated, clipped, rescaled AP from per-detection TP flags."""
    if n_gt == 0:
        raise ValueError("no ground truths")
    if len(tp) == 0:
        recall = np.zeros(0)
        precision = np.zeros(0)
    else:
        tp_cum = np.cumsum(tp)
        fp_cum = np.cumsum(~tp)
        recall = tp_cum / n_gt
        precision = tp_cum / (tp_cum + fp_cum)
    r_grid = np.linspace(0.0, 1.0, N_RECALL_POINTS)
    # max precision at recall >= r
    p_interp = np.zeros(N_RECALL_POINTS)
    for k, r in enumerate(r_grid):
        mask = recall >= r - 1e-12
        p_interp[k] = precision[mask].max() if mask.any() else 0.0
    clipped = p_interp[int(round(100 * MIN_RECALL)) + 1:] - MIN_PRECISION
    clipped[clipped < 0] = 0.0
    ap = float(np.mean(clipped)) / (1.0 - MIN_PRECISION)
    return ap, (r_grid, p_interp)


def average_precision(dets, gts, thresholds=DIST_THRESHOLDS) -> EvalResult:
    """Evaluate detections against ground truths over distance thresholds.

    dets: list of (BBox3D, score, frame_id), any order; gts: list of
    (BBox3D, frame_id)."""
    if len(gts) == 0:
        raise ValueError("no ground truths")
    dets = sorted(dets, key=lambda d: -d[1])
    ap = {}
    curves = {}
    for t in thresholds:
        tp, _ = match_detections(dets, gts, t)
        ap[t], curves[t] = _calc_ap(tp, len(gts))
    aoe, n_tp = average_orientation_error(dets, gts, sort=False)
    return EvalResult(
        ap_per_threshold=ap,
        mean_ap=float(np.mean(list(ap.values()))),
        aoe=aoe,
        aoe_tp_count=n_tp,
        pr_curves=curves,
    )


def average_orientation_error(dets, gts, tp_threshold=2.0, sort=True):
    """Mean absolute wrapped yaw error over TPs at the given threshold.

    Returns (aoe, tp_count); aoe is NaN when there are no TPs."""
    if sort:
        dets = sorted(dets, key=lambda d: -d[1])
    tp, matched = match_detections(dets, gts, tp_threshold)
    errs = [
        abs(wrap_angle(dets[i][0].yaw - gts[matched[i]][0].yaw))
        for i in np.nonzero(tp)[0]
    ]
    if not errs:
        return float("nan"), 0
    return float(np.mean(errs)), len(errs)
