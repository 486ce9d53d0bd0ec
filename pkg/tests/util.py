"""Shared test oracles."""

import numpy as np

from rvfusion.geom import BBox3D


def mc_bev_iou(a: BBox3D, b: BBox3D, n=1_000_000, seed=0):
    """Monte-Carlo BEV IoU oracle by uniform point sampling over the
    bounding window of both boxes."""
    rng = np.random.default_rng(seed)
    ca = a.bev_corners()
    cb = b.bev_corners()
    allc = np.vstack([ca, cb])
    lo = allc.min(axis=0)
    hi = allc.max(axis=0)
    pts = rng.uniform(lo, hi, size=(n, 2))
    in_a = _in_rect(pts, a)
    in_b = _in_rect(pts, b)
    inter = np.sum(in_a & in_b)
    union = np.sum(in_a | in_b)
    return inter / union if union else 0.0


def _in_rect(pts, box: BBox3D):
    c, s = np.cos(box.yaw), np.sin(box.yaw)
    dx = pts[:, 0] - box.x
    dy = pts[:, 1] - box.y
    u = c * dx + s * dy  # along l
    v = -s * dx + c * dy  # along w
    return (np.abs(u) <= box.l / 2) & (np.abs(v) <= box.w / 2)


def random_box(rng, span=10.0):
    return BBox3D(
        x=rng.uniform(-span, span),
        y=rng.uniform(-span, span),
        z=rng.uniform(-2, 2),
        w=rng.uniform(0.5, 3.0),
        l=rng.uniform(0.5, 6.0),
        h=rng.uniform(0.5, 3.0),
        yaw=rng.uniform(-np.pi, np.pi),
    )


def finite_diff_grad(f, x, step=1e-5):
    """Central finite differences of scalar f at array x."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        i = it.multi_index
        xp = x.copy()
        xp[i] += step
        xm = x.copy()
        xm[i] -= step
        g[i] = (f(xp) - f(xm)) / (2 * step)
        it.iternext()
    return g


def assert_grad_close(analytic, numeric, rtol=1e-4, atol=1e-8):
    denom = np.maximum(np.abs(numeric), np.abs(analytic))
    err = np.abs(analytic - numeric)
    ok = err <= atol + rtol * denom
    assert ok.all(), (
        f"gradient mismatch: max abs err {err.max():.3e}, "
        f"worst rel {np.max(err / np.maximum(denom, 1e-300)):.3e}")
