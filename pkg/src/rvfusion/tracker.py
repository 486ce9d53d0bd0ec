"""UKF late-fusion baseline: per-object tracks over detection streams.

State is (x, y, z, yaw, w, l, h, vx, vy) with a constant-velocity motion
model; detections observe the first seven components. Association is
greedy nearest-pair on BEV center distance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geom import BBox3D, wrap_angle

STATE_DIM = 9
MEAS_DIM = 7
_YAW = 3


@dataclass(frozen=True)
class UkfConfig:
    alpha: float = 1e-3
    beta: float = 2.0
    kappa: float = 0.0
    q_diag: tuple = (0.01, 0.01, 0.01, 0.01, 1e-4, 1e-4, 1e-4, 0.5, 0.5)
    r_diag: tuple = (0.25, 0.25, 0.25, 0.04, 0.04, 0.04, 0.04)
    p0_diag: tuple = (1.0, 1.0, 1.0, 1.0, 0.25, 0.25, 0.25, 25.0, 25.0)
    gate: float = 2.0
    birth_hits: int = 2
    death_misses: int = 3

    def __post_init__(self):
        if self.alpha <= 0 or self.gate <= 0:
            raise ValueError("invalid UKF config")


@dataclass
class TrackState:
    mean: np.ndarray  # [9]
    cov: np.ndarray  # [9, 9]
    id: int
    age: int = 0
    hits: int = 0
    misses: int = 0
    score_sum: float = 0.0
    score_n: int = 0

    @property
    def score(self):
        return self.score_sum / self.score_n if self.score_n else 0.0

    def box(self) -> BBox3D:
        m = self.mean
        return BBox3D(m[0], m[1], m[2], max(m[4], 1e-3), max(m[5], 1e-3),
                      max(m[6], 1e-3), wrap_angle(m[3]))


def _symmetrize(P):
    return 0.5 * (P + P.T)


def _check_pd(P, what):
    if np.linalg.eigvalsh(P).min() <= 0:
        raise np.linalg.LinAlgError(f"{what} covariance not positive definite")


def _sigma_points(mean, cov, cfg: UkfConfig):
    n = len(mean)
    lam = cfg.alpha ** 2 * (n + cfg.kappa) - n
    P = _symmetrize(cov)
    _check_pd(P, "state")
    sqrt = np.linalg.cholesky((n + lam) * P)
    pts = np.empty((2 * n + 1, n))
    pts[0] = mean
    pts[1:n + 1] = mean + sqrt.T
    pts[n + 1:] = mean - sqrt.T
    wm = np.full(2 * n + 1, 1.0 / (2 * (n + lam)))
    wc = wm.copy()
    wm[0] = lam / (n + lam)
    wc[0] = lam / (n + lam) + (1 - cfg.alpha ** 2 + cfg.beta)
    return pts, wm, wc


def _anchored_correction(pts, wm):
    """Weighted mean deviation from the central point, pairing the +/-
    sigma points so symmetric deviations cancel without round-off."""
    n = (len(pts) - 1) // 2
    dev = pts - pts[0]
    # all non-central weights are equal under the scaled UT
    return wm[1] * (dev[1:n + 1] + dev[n + 1:]).sum(axis=0)


def ukf_predict(t: TrackState, dt: float, cfg: UkfConfig) -> TrackState:
    """Scaled-UT prediction through the constant-velocity model."""
    if dt < 0:
        raise ValueError("dt must be >= 0")
    pts, wm, wc = _sigma_points(t.mean, t.cov, cfg)
    prop = pts.copy()
    prop[:, 0] += prop[:, 7] * dt
    prop[:, 1] += prop[:, 8] * dt
    # anchored mean: the huge small-alpha weights cancel exactly on the
    # symmetric deviations instead of on O(state) magnitudes; summing the
    # +/- sigma pairs first makes the cancellation exact for linear models
    mean = prop[0] + _anchored_correction(prop, wm)
    diff = prop - mean
    cov = (wc[:, None] * diff).T @ diff + np.diag(cfg.q_diag) * dt
    return TrackState(mean, _symmetrize(cov), t.id, t.age, t.hits, t.misses,
                      t.score_sum, t.score_n)


def _measure(box: BBox3D) -> np.ndarray:
    return np.array([box.x, box.y, box.z, box.yaw, box.w, box.l, box.h])


def ukf_update(t: TrackState, z: BBox3D, cfg: UkfConfig,
               r_diag=None) -> TrackState:
    """Scaled-UT update with direct observation of (x,y,z,yaw,w,l,h).

    The yaw innovation is wrapped to [-pi, pi) both per sigma point and
    for the measurement residual."""
    zv = _measure(z)
    if not np.all(np.isfinite(zv)):
        raise ValueError("non-finite measurement")
    pts, wm, wc = _sigma_points(t.mean, t.cov, cfg)
    # observation: first 7 state components reordered to measurement layout
    zpts = pts[:, [0, 1, 2, _YAW, 4, 5, 6]]
    # anchored means for conditioning; the yaw column is additionally
    # wrapped so the angular mean stays consistent
    n = len(t.mean)
    zdev = zpts - zpts[0]
    zdev[:, 3] = wrap_angle(zdev[:, 3])
    z_mean = zpts[0] + wm[1] * (zdev[1:n + 1] + zdev[n + 1:]).sum(axis=0)
    zdiff = zpts - z_mean
    zdiff[:, 3] = wrap_angle(zdiff[:, 3])
    xdiff = pts - (pts[0] + _anchored_correction(pts, wm))
    R = np.diag(cfg.r_diag if r_diag is None else r_diag)
    S = (wc[:, None] * zdiff).T @ zdiff + R
    _check_pd(_symmetrize(S), "innovation")
    Pxz = (wc[:, None] * xdiff).T @ zdiff
    K = Pxz @ np.linalg.inv(S)
    innov = zv - z_mean
    innov[3] = wrap_angle(innov[3])
    mean = t.mean + K @ innov
    mean[_YAW] = wrap_angle(mean[_YAW])
    cov = _symmetrize(t.cov - K @ S @ K.T)
    return TrackState(mean, cov, t.id, t.age, t.hits, t.misses,
                      t.score_sum, t.score_n)


def associate(tracks, detections, gate: float):
    """Greedy globally-nearest-pair matching on BEV center distance.

    tracks: list of TrackState; detections: list of (BBox3D, score).
    Returns (matches [(track_idx, det_idx)], unmatched_track_idx,
    unmatched_det_idx). Ties break on (track id, det index)."""
    if gate <= 0:
        raise ValueError("gate must be positive")
    pairs = []
    for ti, t in enumerate(tracks):
        for di, (box, _s) in enumerate(detections):
            d = math.hypot(t.mean[0] - box.x, t.mean[1] - box.y)
            if d <= gate:
                pairs.append((d, t.id, di, ti))
    pairs.sort()
    matches = []
    used_t = set()
    used_d = set()
    for _d, _tid, di, ti in pairs:
        if ti in used_t or di in used_d:
            continue
        matches.append((ti, di))
        used_t.add(ti)
        used_d.add(di)
    unmatched_t = [i for i in range(len(tracks)) if i not in used_t]
    unmatched_d = [i for i in range(len(detections)) if i not in used_d]
    return matches, unmatched_t, unmatched_d


@dataclass
class DetectionStream:
    """Per-timestep detection lists from one sensor/detector."""

    name: str
    frames: list  # list of list of (BBox3D, score)
    r_diag: tuple | None = None  # per-stream measurement noise override


class LateFusionTracker:
    """Stateful multi-object tracker fusing one or more detection streams."""

    def __init__(self, cfg: UkfConfig = UkfConfig()):
        self.cfg = cfg
        self.tracks: list[TrackState] = []
        self._next_id = 0
        self._last_time = None

    def _spawn(self, box: BBox3D, score: float):
        mean = np.zeros(STATE_DIM)
        mean[:7][[0, 1, 2, 4, 5, 6]] = [box.x, box.y, box.z, box.w, box.l, box.h]
        mean[_YAW] = box.yaw
        t = TrackState(mean, np.diag(self.cfg.p0_diag), self._next_id,
                       hits=1, score_sum=score, score_n=1)
        self._next_id += 1
        self.tracks.append(t)

    def step(self, timestamp: float, detections, r_diag=None):
        """Predict all tracks to `timestamp`, associate and update."""
        dt = 0.0 if self._last_time is None else timestamp - self._last_time
        self._last_time = timestamp
        if dt > 0:
            self.tracks = [ukf_predict(t, dt, self.cfg) for t in self.tracks]
        matches, unmatched_t, unmatched_d = associate(
            self.tracks, detections, self.cfg.gate)
        for ti, di in matches:
            box, score = detections[di]
            t = ukf_update(self.tracks[ti], box, self.cfg, r_diag)
            t.hits += 1
            t.misses = 0
            t.score_sum += score
            t.score_n += 1
            self.tracks[ti] = t
        for ti in unmatched_t:
            self.tracks[ti].misses += 1
        for di in unmatched_d:
            box, score = detections[di]
            self._spawn(box, score)
        self.tracks = [t for t in self.tracks
                       if t.misses < self.cfg.death_misses]
        for t in self.tracks:
            t.age += 1

    def confirmed(self):
        """Confirmed tracks as (BBox3D, score, track_id)."""
        return [(t.box(), t.score, t.id) for t in self.tracks
                if t.hits >= self.cfg.birth_hits and t.misses == 0]


def run_late_fusion(streams, timestamps, cfg: UkfConfig = UkfConfig()):
    """Run the tracker over time-aligned detection streams.

    streams: list of DetectionStream, each with one detection list per
    timestep; processed in the given fixed order within each timestep.
    Returns per-timestep lists of (BBox3D, score, track_id)."""
    n_steps = len(timestamps)
    for s in streams:
        if len(s.frames) != n_steps:
            raise ValueError(f"stream {s.name!r} not aligned with timestamps")
    tracker = LateFusionTracker(cfg)
    out = []
    for k, ts in enumerate(timestamps):
        for s in streams:
            tracker.step(ts, s.frames[k], r_diag=s.r_diag)
        out.append(tracker.confirmed())
    return out
