"""Deterministic synthetic scene generator: lidar/radar/camera frames with
ground-truth boxes and ego poses, plus weather degradation.

Lidar returns come from casting a fixed azimuth/elevation beam grid
against actor boxes (slab tests) and the ground plane; each beam keeps its
nearest hit, which gives exact occlusion and range-dependent density.
Radar emits a Poisson number of returns near each visible actor's facing
surface plus uniform clutter. The camera flat-shades actor silhouettes in
their colors over a gray background.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geom import BBox3D, Pose, transform_box, transform_points, wrap_angle
from .fusionio import CameraFrame

GROUND_Z = -1.8


@dataclass(frozen=True)
class Actor:
    box: BBox3D  # pose at t=0, world frame
    velocity: tuple  # (vx, vy) m/s, world frame
    color: tuple  # (r, g, b) in [0, 1]

    def box_at(self, t: float) -> BBox3D:
        vx, vy = self.velocity
        return replace(self.box, x=self.box.x + vx * t, y=self.box.y + vy * t)


@dataclass
class SceneSpec:
    duration: float
    frame_rate: float
    ego_poses: list  # one Pose per frame, world frame
    actors: list  # list of Actor
    seed: int = 0
    weather: str = "clear"

    @property
    def n_frames(self):
        return len(self.ego_poses)

    def timestamps(self):
        return [i / self.frame_rate for i in range(self.n_frames)]


@dataclass(frozen=True)
class LidarSpec:
    n_beams: int = 24
    elevation_range: tuple = (-0.30, 0.08)  # radians
    azimuth_range: tuple = (-1.0, 1.0)  # radians
    azimuth_res: float = 0.006
    max_range: float = 60.0
    range_noise: float = 0.02
    dropout: float = 0.02


@dataclass(frozen=True)
class RadarSpec:
    points_per_object: float = 2.0  # Poisson rate
    position_noise: float = 0.3
    clutter_rate: float = 1.0  # Poisson per frame
    rcs_mean: float = 10.0
    rcs_noise: float = 3.0
    velocity_noise: float = 0.2
    max_range: float = 70.0


@dataclass(frozen=True)
class CameraSpec:
    width: int = 160
    height: int = 96
    fx: float = 120.0
    fy: float = 120.0
    pixel_noise: float = 0.01

    @property
    def cx(self):
        return self.width / 2.0

    @property
    def cy(self):
        return self.height / 2.0


@dataclass(frozen=True)
class SensorSpec:
    lidar: LidarSpec = field(default_factory=LidarSpec)
    radar: RadarSpec = field(default_factory=RadarSpec)
    camera: CameraSpec = field(default_factory=CameraSpec)


@dataclass(frozen=True)
class WeatherSpec:
    mode: str = "clear"
    lidar_dropout_add: float = 0.0
    lidar_noise_mult: float = 1.0
    camera_gain: float = 1.0
    camera_noise_add: float = 0.0


WEATHER_PRESETS = {
    "clear": WeatherSpec("clear"),
    "rain": WeatherSpec("rain", lidar_dropout_add=0.85, lidar_noise_mult=3.0,
                        camera_noise_add=0.08),
    "night": WeatherSpec("night", camera_gain=0.25, camera_noise_add=0.05),
}


@dataclass
class Frame:
    lidar: np.ndarray  # [N, 4]
    radar: np.ndarray  # [M, 6]
    camera: CameraFrame
    gt_boxes: list  # BBox3D, ego frame
    ego_pose: Pose  # world frame
    timestamp: float


def _box_axes(box: BBox3D):
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    fwd = np.array([c, s, 0.0])  # along l
    left = np.array([-s, c, 0.0])  # along w
    up = np.array([0.0, 0.0, 1.0])
    return fwd, left, up


def _ray_box_hits(origins_dir: np.ndarray, box: BBox3D):
    """Nearest-hit distance of unit rays from the origin against an OBB.

    Returns t per ray (inf where missed)."""
    fwd, left, up = _box_axes(box)
    center = np.array([box.x, box.y, box.z])
    half = np.array([box.l / 2, box.w / 2, box.h / 2])
    axes = np.stack([fwd, left, up])  # [3, 3]
    d_local = origins_dir @ axes.T  # ray dirs in box frame
    o_local = -(center @ axes.T)  # origin in box frame (sensor at 0)
    t = np.full(len(origins_dir), np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - o_local) / d_local
        t2 = (half - o_local) / d_local
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    # parallel rays: inside slab iff |o| <= half
    par = np.abs(d_local) < 1e-12
    tmin[par] = -np.inf
    tmax[par] = np.inf
    near = tmin.max(axis=1)
    far = tmax.min(axis=1)
    inside_par = par & (np.abs(o_local) > half)
    hit = (near <= far) & (far > 1e-9) & ~inside_par.any(axis=1)
    t[hit] = np.where(near[hit] > 1e-9, near[hit], far[hit])
    return t


def _beam_grid(spec: LidarSpec):
    az = np.arange(spec.azimuth_range[0], spec.azimuth_range[1], spec.azimuth_res)
    el = np.linspace(spec.elevation_range[0], spec.elevation_range[1], spec.n_beams)
    azg, elg = np.meshgrid(az, el, indexing="ij")
    az_f = azg.ravel()
    el_f = elg.ravel()
    dirs = np.stack([
        np.cos(el_f) * np.cos(az_f),
        np.cos(el_f) * np.sin(az_f),
        np.sin(el_f),
    ], axis=1)
    return dirs


def _render_lidar(actors_ego, spec: LidarSpec, rng):
    dirs = _beam_grid(spec)
    t_best = np.full(len(dirs), np.inf)
    is_actor = np.zeros(len(dirs), dtype=bool)
    for box in actors_ego:
        t = _ray_box_hits(dirs, box)
        better = t < t_best
        t_best[better] = t[better]
        is_actor[better] = True
    # ground plane z = GROUND_Z
    dz = dirs[:, 2]
    with np.errstate(divide="ignore"):
        t_ground = np.where(dz < -1e-9, GROUND_Z / dz, np.inf)
    ground_better = t_ground < t_best
    t_best[ground_better] = t_ground[ground_better]
    is_actor[ground_better] = False

    hit = t_best < spec.max_range
    if spec.dropout > 0:
        hit &= rng.random(len(dirs)) >= spec.dropout
    t_hit = t_best[hit]
    if spec.range_noise > 0:
        t_hit = t_hit + rng.normal(0.0, spec.range_noise, size=len(t_hit))
    pts = dirs[hit] * t_hit[:, None]
    intens = np.where(is_actor[hit], 0.7, 0.3)
    intens = np.clip(intens + rng.normal(0.0, 0.02, size=len(intens)), 0.0, 1.0)
    return np.column_stack([pts, intens])


def _visible(box: BBox3D, others):
    """Line-of-sight check from the sensor to the box center."""
    r = math.sqrt(box.x ** 2 + box.y ** 2 + box.z ** 2)
    if r < 1e-6:
        return True
    d = np.array([[box.x / r, box.y / r, box.z / r]])
    for o in others:
        t = _ray_box_hits(d, o)[0]
        if t < r - 1e-6:
            return False
    return True


def _render_radar(actors_ego, rel_velocities, spec: RadarSpec, rng):
    rows = []
    for idx, box in enumerate(actors_ego):
        rng_c = math.hypot(box.x, box.y)
        if rng_c > spec.max_range or rng_c < 1e-6:
            continue
        others = [b for j, b in enumerate(actors_ego) if j != idx]
        if not _visible(box, others):
            continue
        k = rng.poisson(spec.points_per_object)
        if k == 0:
            continue
        # facing surface: center pulled toward the sensor by the extent
        # along the line of sight
        los = np.array([box.x / rng_c, box.y / rng_c])
        fwd, left, _ = _box_axes(box)
        pull = abs(los @ fwd[:2]) * box.l / 2 + abs(los @ left[:2]) * box.w / 2
        surf = np.array([box.x, box.y]) - los * pull
        px = surf[0] + rng.normal(0, spec.position_noise, k)
        py = surf[1] + rng.normal(0, spec.position_noise, k)
        pz = np.full(k, box.z) + rng.normal(0, 0.05, k)
        vrel = rel_velocities[idx]
        for i in range(k):
            pr = math.hypot(px[i], py[i])
            if pr < 1e-6:
                continue
            az = math.atan2(py[i], px[i])
            v_r = (vrel[0] * px[i] + vrel[1] * py[i]) / pr
            v_r += rng.normal(0, spec.velocity_noise)
            rcs = rng.normal(spec.rcs_mean, spec.rcs_noise)
            rows.append([px[i], py[i], pz[i], rcs,
                         v_r * math.cos(az), v_r * math.sin(az)])
    n_clutter = rng.poisson(spec.clutter_rate)
    for _ in range(n_clutter):
        az = rng.uniform(-1.2, 1.2)
        r = rng.uniform(2.0, spec.max_range)
        v_r = rng.normal(0, 5.0)
        rows.append([r * math.cos(az), r * math.sin(az),
                     rng.uniform(-1.5, 0.5), rng.normal(0.0, 5.0),
                     v_r * math.cos(az), v_r * math.sin(az)])
    return np.array(rows).reshape(-1, 6)


def _box_corners_3d(box: BBox3D):
    fwd, left, up = _box_axes(box)
    center = np.array([box.x, box.y, box.z])
    corners = []
    for sl in (-1, 1):
        for sw in (-1, 1):
            for sh in (-1, 1):
                corners.append(center + sl * box.l / 2 * fwd
                               + sw * box.w / 2 * left + sh * box.h / 2 * up)
    return np.array(corners)


def _fill_convex(img, pts2d, color):
    """Rasterize the convex hull of projected points into img."""
    if len(pts2d) < 3:
        return
    hull = _convex_hull(pts2d)
    if len(hull) < 3:
        return
    H, W, _ = img.shape
    x0 = max(int(np.floor(hull[:, 0].min())), 0)
    x1 = min(int(np.ceil(hull[:, 0].max())) + 1, W)
    y0 = max(int(np.floor(hull[:, 1].min())), 0)
    y1 = min(int(np.ceil(hull[:, 1].max())) + 1, H)
    if x0 >= x1 or y0 >= y1:
        return
    xs, ys = np.meshgrid(np.arange(x0, x1) + 0.5, np.arange(y0, y1) + 0.5)
    inside = np.ones(xs.shape, dtype=bool)
    n = len(hull)
    for i in range(n):
        a = hull[i]
        b = hull[(i + 1) % n]
        inside &= (b[0] - a[0]) * (ys - a[1]) - (b[1] - a[1]) * (xs - a[0]) >= 0
    img[y0:y1, x0:x1][inside] = color


def _convex_hull(pts):
    """Andrew monotone chain; returns CCW hull vertices."""
    pts = sorted(map(tuple, pts))
    if len(pts) <= 2:
        return np.array(pts)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper = []
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def _render_camera(actors_ego, colors, spec: CameraSpec, rng):
    img = np.full((spec.height, spec.width, 3), 0.5)
    cam = CameraFrame(spec.width, spec.height, img, spec.fx, spec.fy,
                      spec.cx, spec.cy)
    # painter's order: far to near
    order = sorted(range(len(actors_ego)),
                   key=lambda i: -math.hypot(actors_ego[i].x, actors_ego[i].y))
    from .fusionio import project_to_image
    for i in order:
        corners = _box_corners_3d(actors_ego[i])
        u, v, valid = project_to_image(corners, cam)
        if valid.sum() < 3:
            continue
        _fill_convex(img, np.stack([u[valid], v[valid]], axis=1),
                     np.array(colors[i]))
    if spec.pixel_noise > 0:
        img = np.clip(img + rng.normal(0, spec.pixel_noise, img.shape), 0, 1)
    cam.rgb = img
    return cam


def _ego_velocity(scene: SceneSpec, frame_idx: int):
    """World-frame ego velocity by finite difference of stored poses."""
    poses = scene.ego_poses
    dt = 1.0 / scene.frame_rate
    if len(poses) < 2:
        return np.zeros(2)
    j = min(frame_idx, len(poses) - 2)
    return np.array([
        (poses[j + 1].tx - poses[j].tx) / dt,
        (poses[j + 1].ty - poses[j].ty) / dt,
    ])


def generate_frame(scene: SceneSpec, sensors: SensorSpec, frame_idx: int,
                   rng: np.random.Generator) -> Frame:
    """Render one synchronized frame of all three sensors in the ego frame."""
    if not 0 <= frame_idx < scene.n_frames:
        raise ValueError("frame index outside scene duration")
    t = frame_idx / scene.frame_rate
    ego = scene.ego_poses[frame_idx]
    inv_ego = ego.inverse()
    ego_v = _ego_velocity(scene, frame_idx)

    actors_ego = []
    rel_vel_ego = []
    colors = []
    for a in scene.actors:
        wbox = a.box_at(t)
        actors_ego.append(transform_box(wbox, inv_ego))
        rel_w = np.array(a.velocity) - ego_v
        c, s = math.cos(-ego.yaw), math.sin(-ego.yaw)
        rel_vel_ego.append(np.array([c * rel_w[0] - s * rel_w[1],
                                     s * rel_w[0] + c * rel_w[1]]))
        colors.append(a.color)

    lidar = _render_lidar(actors_ego, sensors.lidar, rng)
    radar = _render_radar(actors_ego, rel_vel_ego, sensors.radar, rng)
    camera = _render_camera(actors_ego, colors, sensors.camera, rng)
    return Frame(lidar, radar, camera, list(actors_ego), ego, t)


def apply_weather(frame: Frame, weather: WeatherSpec,
                  rng: np.random.Generator) -> Frame:
    """Degrade a frame per the weather mode. Radar is never touched."""
    if weather.mode == "clear":
        return frame
    lidar = frame.lidar
    rgb = frame.camera.rgb
    if weather.mode == "rain":
        keep = rng.random(len(lidar)) >= weather.lidar_dropout_add
        lidar = lidar[keep].copy()
        if weather.lidar_noise_mult > 1.0 and len(lidar):
            extra = math.sqrt(weather.lidar_noise_mult ** 2 - 1.0) * 0.02
            r = np.linalg.norm(lidar[:, :3], axis=1)
            scale = 1.0 + rng.normal(0, extra, len(lidar)) / np.maximum(r, 1e-6)
            lidar[:, :3] *= scale[:, None]
    if weather.camera_gain < 1.0 or weather.camera_noise_add > 0:
        rgb = np.clip(rgb * weather.camera_gain
                      + rng.normal(0, weather.camera_noise_add, rgb.shape), 0, 1)
    cam = CameraFrame(frame.camera.width, frame.camera.height, rgb,
                      frame.camera.fx, frame.camera.fy, frame.camera.cx,
                      frame.camera.cy, frame.camera.pose)
    return Frame(lidar, frame.radar, cam, frame.gt_boxes, frame.ego_pose,
                 frame.timestamp)


def random_scene(seed: int, n_frames: int = 6, frame_rate: float = 2.0,
                 weather: str = "clear", x_range=(6.0, 45.0),
                 y_range=(-14.0, 14.0), max_actors: int = 3) -> SceneSpec:
    """Seeded random scene whose actors stay in range for every frame."""
    rng = np.random.default_rng(seed)
    duration = n_frames / frame_rate
    for _attempt in range(100):
        n_actors = int(rng.integers(1, max_actors + 1))
        actors = []
        for _ in range(n_actors):
            x = rng.uniform(*x_range)
            y = rng.uniform(*y_range)
            yaw = rng.uniform(-math.pi, math.pi)
            speed = rng.uniform(0.0, 6.0)
            actors.append(Actor(
                box=BBox3D(x, y, -1.0,
                           rng.uniform(1.7, 2.1), rng.uniform(4.2, 5.0),
                           rng.uniform(1.5, 1.9), yaw),
                velocity=(speed * math.cos(yaw), speed * math.sin(yaw)),
                color=tuple(rng.uniform(0.1, 1.0, 3)),
            ))
        ego_speed = rng.uniform(0.0, 3.0)
        ego_poses = [Pose(tx=ego_speed * i / frame_rate) for i in range(n_frames)]
        spec = SceneSpec(duration, frame_rate, ego_poses, actors, seed, weather)
        if _all_frames_populated(spec):
            return spec
    raise RuntimeError("could not draw a populated scene")


def _all_frames_populated(scene: SceneSpec, x_lim=(0.0, 50.0),
                          y_lim=(-20.0, 20.0)):
    for i in range(scene.n_frames):
        t = i / scene.frame_rate
        inv = scene.ego_poses[i].inverse()
        ok = False
        for a in scene.actors:
            b = transform_box(a.box_at(t), inv)
            if x_lim[0] + 2 <= b.x < x_lim[1] - 2 and y_lim[0] + 2 <= b.y < y_lim[1] - 2:
                ok = True
                break
        if not ok:
            return False
    return True
