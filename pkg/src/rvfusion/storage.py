"""On-disk dataset format.

One directory per scene. Per frame: a JSON header (timestamp, ego pose,
camera intrinsics/pose, gt boxes, blob row counts) plus raw little-endian
float32 blobs with fixed column orders:

    frame_NNNN_lidar.f32   x, y, z, i
    frame_NNNN_radar.f32   x, y, z, rcs, vx, vy
    frame_NNNN_image.f32   row-major H x W x 3 RGB

A dataset root holds scene directories plus manifest.json (scene list,
seeds, weather modes, split membership, counts, config hash).
"""

from __future__ import annotations

import json
import os

import numpy as np

from .fusionio import CameraFrame
from .geom import BBox3D, Pose
from .scenegen import Frame


def _pose_dict(p: Pose):
    return {"tx": p.tx, "ty": p.ty, "tz": p.tz, "yaw": p.yaw}


def _pose_from(d):
    return Pose(d["tx"], d["ty"], d["tz"], d["yaw"])


def _box_list(b: BBox3D):
    return [b.x, b.y, b.z, b.w, b.l, b.h, b.yaw]


def _write_blob(path, arr):
    np.asarray(arr, dtype="<f4").tofile(path)


def _read_blob(path, cols):
    return np.fromfile(path, dtype="<f4").astype(np.float64).reshape(-1, cols)


def save_frame(scene_dir: str, index: int, frame: Frame):
    stem = os.path.join(scene_dir, f"frame_{index:04d}")
    cam = frame.camera
    header = {
        "timestamp": frame.timestamp,
        "ego_pose": _pose_dict(frame.ego_pose),
        "camera": {
            "width": cam.width, "height": cam.height,
            "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "pose": _pose_dict(cam.pose),
        },
        "gt_boxes": [_box_list(b) for b in frame.gt_boxes],
        "counts": {"lidar": len(frame.lidar), "radar": len(frame.radar)},
    }
    with open(stem + ".json", "w") as f:
        json.dump(header, f, sort_keys=True)
    _write_blob(stem + "_lidar.f32", frame.lidar.reshape(-1, 4))
    _write_blob(stem + "_radar.f32", frame.radar.reshape(-1, 6))
    _write_blob(stem + "_image.f32", cam.rgb.reshape(-1))


def load_frame(scene_dir: str, index: int) -> Frame:
    stem = os.path.join(scene_dir, f"frame_{index:04d}")
    with open(stem + ".json") as f:
        header = json.load(f)
    c = header["camera"]
    rgb = np.fromfile(stem + "_image.f32", dtype="<f4").astype(np.float64)
    rgb = rgb.reshape(c["height"], c["width"], 3)
    cam = CameraFrame(c["width"], c["height"], rgb, c["fx"], c["fy"],
                      c["cx"], c["cy"], _pose_from(c["pose"]))
    lidar = _read_blob(stem + "_lidar.f32", 4)
    radar = _read_blob(stem + "_radar.f32", 6)
    if len(lidar) != header["counts"]["lidar"] or len(radar) != header["counts"]["radar"]:
        raise ValueError(f"blob size mismatch in {stem}")
    gts = [BBox3D(*row) for row in header["gt_boxes"]]
    return Frame(lidar, radar, cam, gts, _pose_from(header["ego_pose"]),
                 header["timestamp"])


def scene_frame_count(scene_dir: str) -> int:
    return len([f for f in os.listdir(scene_dir)
                if f.startswith("frame_") and f.endswith(".json")])


def load_scene(scene_dir: str):
    return [load_frame(scene_dir, i) for i in range(scene_frame_count(scene_dir))]


def write_manifest(root: str, manifest: dict):
    with open(os.path.join(root, "manifest.json"), "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=1)


def read_manifest(root: str) -> dict:
    path = os.path.join(root, "manifest.json")
    if not os.path.exists(path):
        raise FileNotFoundError(f"no manifest in {root}")
    with open(path) as f:
        return json.load(f)


def split_scene_dirs(root: str, split: str):
    """Scene directories of one split ('train' or 'val'), manifest order."""
    manifest = read_manifest(root)
    return [os.path.join(root, s["dir"]) for s in manifest["scenes"]
            if s["split"] == split]
