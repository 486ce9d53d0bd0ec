"""Command-line entry point: generate / train / eval / compare / track.

Configuration is a JSON file mirroring the documented key tree below;
flags override file values which override defaults. Unknown keys are
rejected. Every artifact records the config snapshot and its hash.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import __version__
from .losses import LossWeights
from .net import (NetConfig, config_hash, build_params, load_checkpoint,
                  save_checkpoint)
from .scenegen import (SensorSpec, LidarSpec, RadarSpec, CameraSpec,
                       WEATHER_PRESETS, WeatherSpec, apply_weather,
                       generate_frame, random_scene)
from .storage import (load_scene, read_manifest, save_frame, split_scene_dirs,
                      write_manifest)
from .tracker import DetectionStream, UkfConfig, run_late_fusion
from .trainer import (AugmentRanges, TrainConfig, evaluate, infer,
                      preprocess_frame, train)
from .voxel import GridConfig
from . import evalmetrics

ENV_DATA_ROOT = "RVFUSION_DATA_ROOT"

DEFAULT_CONFIG = {
    "seed": 0,
    "grid": {
        "x_range": [0.0, 50.0],
        "y_range": [-20.0, 20.0],
        "z_range": [-3.0, 3.0],
        "voxel_xy": 0.2,
        "voxel_z": 0.4,
        "max_points": 40,
    },
    "net": {
        "vfe1_channels": 16,
        "vfe2_channels": 32,
        "sparse_channels": [32, 32],
        "trunk_channels": 64,
        "trunk_blocks": 3,
    },
    "train": {
        "epochs": 50,
        "learning_rate": 1e-3,
        "augment": True,
        "score_threshold": 0.3,
        "nms_iou": 0.1,
        "sweeps": 3,
        "modalities": ["lidar", "rgb", "radar"],
        "yaw_mode": "sine",
        "patience": 10,
        "val_interval": 1,
    },
    "loss_weights": {"w_cls": 1.0, "w_reg": 2.0, "w_dir": 0.2},
    "anchors": {"dims": [1.9, 4.6, 1.7], "z": -1.0},
    "matching": {"iou_pos": 0.35, "iou_neg": 0.30, "dist_pos": 0.5},
    "dataset": {
        "n_scenes": 10,
        "frames_per_scene": 6,
        "frame_rate": 2.0,
        "train_ratio": 0.8,
        "weather": "clear",
    },
    "sensors": {
        "lidar": {
            "n_beams": 24, "azimuth_res": 0.006, "max_range": 60.0,
            "range_noise": 0.02, "dropout": 0.02,
        },
        "radar": {
            "points_per_object": 2.0, "position_noise": 0.3,
            "clutter_rate": 1.0, "rcs_mean": 10.0, "rcs_noise": 3.0,
            "velocity_noise": 0.2, "max_range": 70.0,
        },
        "camera": {"width": 160, "height": 96, "fx": 120.0, "fy": 120.0,
                   "pixel_noise": 0.01},
    },
    "ukf": {
        "gate": 2.0, "birth_hits": 2, "death_misses": 3,
        "radar_r_scale": 4.0,
    },
}


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


def _merge_validate(base, override, path=""):
    out = copy.deepcopy(base)
    for k, v in override.items():
        if k not in base:
            raise ConfigError(f"unknown config key {path + k!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {path + k!r} must be a mapping")
            out[k] = _merge_validate(base[k], v, path + k + ".")
        else:
            out[k] = v
    return out


def load_config(path=None, overrides=None):
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path:
        try:
            with open(path) as f:
                user = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file is not valid JSON: {e}")
        cfg = _merge_validate(cfg, user)
    for dotted, value in (overrides or {}).items():
        node = cfg
        keys = dotted.split(".")
        for k in keys[:-1]:
            if k not in node or not isinstance(node[k], dict):
                raise ConfigError(f"unknown config key {dotted!r}")
            node = node[k]
        if keys[-1] not in node:
            raise ConfigError(f"unknown config key {dotted!r}")
        old = node[keys[-1]]
        node[keys[-1]] = _coerce(value, old)
    return cfg


def _coerce(value, old):
    if isinstance(old, bool):
        return value.lower() in ("1", "true", "yes") if isinstance(value, str) else bool(value)
    if isinstance(old, int) and not isinstance(old, bool):
        return int(value)
    if isinstance(old, float):
        return float(value)
    if isinstance(old, list):
        return json.loads(value) if isinstance(value, str) else list(value)
    return value


def grid_from(cfg) -> GridConfig:
    g = cfg["grid"]
    return GridConfig(tuple(g["x_range"]), tuple(g["y_range"]),
                      tuple(g["z_range"]), g["voxel_xy"], g["voxel_z"],
                      g["max_points"])


def train_config_from(cfg) -> TrainConfig:
    t = cfg["train"]
    n = cfg["net"]
    return TrainConfig(
        epochs=t["epochs"],
        learning_rate=t["learning_rate"],
        seed=cfg["seed"],
        augment=t["augment"],
        score_threshold=t["score_threshold"],
        nms_iou=t["nms_iou"],
        sweeps=t["sweeps"],
        loss_weights=LossWeights(**cfg["loss_weights"]),
        grid=grid_from(cfg),
        net=NetConfig(
            vfe1_channels=n["vfe1_channels"],
            vfe2_channels=n["vfe2_channels"],
            sparse_channels=tuple(n["sparse_channels"]),
            trunk_channels=n["trunk_channels"],
            trunk_blocks=n["trunk_blocks"],
        ),
        modalities=tuple(t["modalities"]),
        yaw_mode=t["yaw_mode"],
        anchor_dims=tuple(cfg["anchors"]["dims"]),
        anchor_z=cfg["anchors"]["z"],
        iou_pos=cfg["matching"]["iou_pos"],
        iou_neg=cfg["matching"]["iou_neg"],
        dist_pos=cfg["matching"]["dist_pos"],
        patience=t["patience"],
        val_interval=t["val_interval"],
    )


def sensors_from(cfg) -> SensorSpec:
    s = cfg["sensors"]
    return SensorSpec(
        lidar=LidarSpec(**s["lidar"]),
        radar=RadarSpec(**s["radar"]),
        camera=CameraSpec(**s["camera"]),
    )


def ukf_from(cfg) -> UkfConfig:
    u = cfg["ukf"]
    return UkfConfig(gate=u["gate"], birth_hits=u["birth_hits"],
                     death_misses=u["death_misses"])


# ---- commands ----

def cmd_generate(cfg, out_dir, force=False):
    if os.path.isdir(out_dir) and os.listdir(out_dir) and not force:
        raise DataError(f"output dir {out_dir} not empty (use --force)")
    os.makedirs(out_dir, exist_ok=True)
    d = cfg["dataset"]
    sensors = sensors_from(cfg)
    weather_mode = d["weather"]
    if weather_mode not in WEATHER_PRESETS:
        raise ConfigError(f"unknown weather mode {weather_mode!r}")
    n_scenes = d["n_scenes"]
    n_train = int(round(d["train_ratio"] * n_scenes))
    scenes = []
    for i in range(n_scenes):
        split = "train" if i < n_train else "val"
        seed = cfg["seed"] * 1000003 + i
        spec = random_scene(seed, n_frames=d["frames_per_scene"],
                            frame_rate=d["frame_rate"], weather=weather_mode)
        scene_dir = os.path.join(out_dir, f"scene_{i:04d}")
        os.makedirs(scene_dir, exist_ok=True)
        rng = np.random.default_rng(seed + 500009)
        weather = WEATHER_PRESETS[weather_mode]
        counts = {"lidar": 0, "radar": 0}
        for fi in range(spec.n_frames):
            frame = generate_frame(spec, sensors, fi, rng)
            frame = apply_weather(frame, weather, rng)
            save_frame(scene_dir, fi, frame)
            counts["lidar"] += len(frame.lidar)
            counts["radar"] += len(frame.radar)
        scenes.append({"dir": f"scene_{i:04d}", "split": split, "seed": seed,
                       "weather": weather_mode, "frames": spec.n_frames,
                       "points": counts})
    manifest = {
        "version": __version__,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "scenes": scenes,
        "counts": {
            "train_scenes": n_train,
            "val_scenes": n_scenes - n_train,
            "train_frames": sum(s["frames"] for s in scenes if s["split"] == "train"),
            "val_frames": sum(s["frames"] for s in scenes if s["split"] == "val"),
        },
    }
    write_manifest(out_dir, manifest)
    return manifest


def _load_samples(data_dir, split, tcfg: TrainConfig):
    dirs = split_scene_dirs(data_dir, split)
    samples = []
    for sd in dirs:
        frames = load_scene(sd)
        for i in range(len(frames)):
            samples.append(preprocess_frame(frames, i, tcfg))
    return samples


def cmd_train(cfg, data_dir, run_dir):
    read_manifest(data_dir)  # dataset must exist and be well-formed
    tcfg = train_config_from(cfg)
    train_samples = _load_samples(data_dir, "train", tcfg)
    val_samples = _load_samples(data_dir, "val", tcfg)
    val_samples = [s for s in val_samples if len(s[1]) > 0]
    if not train_samples:
        raise DataError("no training frames")
    os.makedirs(run_dir, exist_ok=True)
    snap_hash = config_hash(cfg)
    with open(os.path.join(run_dir, "config.json"), "w") as f:
        json.dump({"config": cfg, "config_hash": snap_hash,
                   "version": __version__}, f, sort_keys=True, indent=1)
    result = train(train_samples, tcfg, val_samples or None)
    with open(os.path.join(run_dir, "metrics.csv"), "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["epoch", "loss", "val_ap"])
        for row in result.curves:
            wr.writerow([row["epoch"], f"{row['loss']:.6f}",
                         f"{row['val_ap']:.6f}"])
    result.params.load_state_dict(result.best_state)
    save_checkpoint(os.path.join(run_dir, "best.ckpt"), result.params, snap_hash)
    with open(os.path.join(run_dir, "report.json"), "w") as f:
        json.dump({"best_val_ap": result.best_val_ap,
                   "best_epoch": result.best_epoch,
                   "epochs_run": len(result.curves)}, f, indent=1)
    return result


def _load_detector(run_dir):
    with open(os.path.join(run_dir, "config.json")) as f:
        snap = json.load(f)
    cfg = snap["config"]
    tcfg = train_config_from(cfg)
    ckpt = os.path.join(run_dir, "best.ckpt")
    if not os.path.exists(ckpt):
        raise DataError(f"missing checkpoint in {run_dir}")
    state, _ = load_checkpoint(ckpt)
    params = build_params(replace(tcfg.net, init_seed=tcfg.seed), tcfg.grid)
    params.load_state_dict(state)
    return params, tcfg


def cmd_eval(run_dir, data_dir, split="val", detector="network"):
    """detector: 'network' | 'oracle' (gts as perfect dets) | 'empty'."""
    if detector == "network":
        params, tcfg = _load_detector(run_dir)
    else:
        cfg = load_config()
        tcfg = train_config_from(cfg)
        params = None
        os.makedirs(run_dir, exist_ok=True)
    samples = [s for s in _load_samples(data_dir, split, tcfg) if len(s[1]) > 0]
    if not samples:
        raise DataError(f"no frames with ground truth in split {split!r}")
    dets = []
    gts = []
    for fid, (cloud, frame_gts) in enumerate(samples):
        for b in frame_gts:
            gts.append((b, fid))
        if detector == "oracle":
            for b in frame_gts:
                dets.append((b, 1.0, fid))
        elif detector == "network":
            for box, score in infer(params, cloud, tcfg):
                dets.append((box, score, fid))
    try:
        result = evalmetrics.average_precision(dets, gts)
    except ValueError as e:
        raise DataError(str(e))
    _write_eval_outputs(run_dir, split, result)
    return result


def _write_eval_outputs(run_dir, split, result):
    path = os.path.join(run_dir, f"eval_{split}.csv")
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["metric", "value"])
        for t in sorted(result.ap_per_threshold):
            wr.writerow([f"ap@{t}m", f"{result.ap_per_threshold[t]:.6f}"])
        wr.writerow(["mean_ap", f"{result.mean_ap:.6f}"])
        wr.writerow(["aoe_rad", f"{result.aoe:.6f}"])
        wr.writerow(["aoe_tp_count", result.aoe_tp_count])
        wr.writerow(["interp_points", evalmetrics.N_RECALL_POINTS])
    for t, (recall, precision) in result.pr_curves.items():
        _write_pr_svg(os.path.join(run_dir, f"pr_{split}_{t}m.svg"),
                      recall, precision, f"PR curve @ {t} m")


def _write_pr_svg(path, recall, precision, title):
    W, H, M = 400, 300, 40
    pts = " ".join(
        f"{M + r * (W - 2 * M):.1f},{H - M - p * (H - 2 * M):.1f}"
        for r, p in zip(recall, precision))
    svg = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}">'
        f'<rect width="{W}" height="{H}" fill="white"/>'
        f'<text x="{W / 2}" y="20" text-anchor="middle" font-size="13">{title}</text>'
        f'<line x1="{M}" y1="{H - M}" x2="{W - M}" y2="{H - M}" stroke="black"/>'
        f'<line x1="{M}" y1="{M}" x2="{M}" y2="{H - M}" stroke="black"/>'
        f'<polyline fill="none" stroke="steelblue" stroke-width="1.5" points="{pts}"/>'
        f'</svg>')
    with open(path, "w") as f:
        f.write(svg)


def cmd_compare(cfg, data_dir, out_dir, variants=None):
    """Train and evaluate input-modality variants on one dataset.

    Emits a CSV with one row per variant (plus a tracked-late-fusion row)
    and the validation mean AP."""
    variants = variants or [
        ("lidar", ["lidar"]),
        ("radar", ["radar"]),
        ("lidar_radar", ["lidar", "radar"]),
        ("lidar_rgb_radar", ["lidar", "rgb", "radar"]),
    ]
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    run_dirs = {}
    for name, modalities in variants:
        vcfg = copy.deepcopy(cfg)
        vcfg["train"]["modalities"] = list(modalities)
        run_dir = os.path.join(out_dir, f"run_{name}")
        cmd_train(vcfg, data_dir, run_dir)
        result = cmd_eval(run_dir, data_dir, "val")
        run_dirs[name] = run_dir
        rows.append({"variant": name, "mean_ap": result.mean_ap,
                     "aoe": result.aoe})
    # late-fusion row: per-sensor detectors fused by the tracker
    if "lidar" in run_dirs and "radar" in run_dirs:
        tracked = cmd_track(cfg, [run_dirs["lidar"], run_dirs["radar"]],
                            data_dir, os.path.join(out_dir, "late_fusion"))
        rows.append({"variant": "tracked_late_fusion",
                     "mean_ap": tracked["mean_ap"], "aoe": float("nan")})
    path = os.path.join(out_dir, "compare.csv")
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["variant", "mean_ap", "aoe"])
        for r in rows:
            wr.writerow([r["variant"], f"{r['mean_ap']:.6f}", f"{r['aoe']:.6f}"])
    return rows


def cmd_track(cfg, run_dirs, data_dir, out_dir, split="val"):
    """Run UKF late fusion over per-sensor detectors and report tracked AP."""
    os.makedirs(out_dir, exist_ok=True)
    detectors = [_load_detector(rd) for rd in run_dirs]
    ucfg = ukf_from(cfg)
    radar_scale = cfg["ukf"]["radar_r_scale"]
    scene_dirs = split_scene_dirs(data_dir, split)
    if not scene_dirs:
        raise DataError("no scenes in split")
    all_dets = []
    all_gts = []
    fid = 0
    for sd in scene_dirs:
        frames = load_scene(sd)
        timestamps = [f.timestamp for f in frames]
        if any(b <= a for a, b in zip(timestamps, timestamps[1:])):
            raise DataError(f"non-coherent timestamps in {sd}")
        streams = []
        for params, tcfg in detectors:
            per_frame = []
            for i in range(len(frames)):
                cloud, _ = preprocess_frame(frames, i, tcfg)
                per_frame.append(infer(params, cloud, tcfg))
            r = None
            if tcfg.modalities == ("radar",):
                r = tuple(radar_scale * x for x in UkfConfig().r_diag)
            streams.append(DetectionStream(
                name=",".join(tcfg.modalities), frames=per_frame, r_diag=r))
        per_step = run_late_fusion(streams, timestamps, ucfg)
        for i, frame in enumerate(frames):
            for box, score, _tid in per_step[i]:
                all_dets.append((box, score, fid))
            _, tcfg0 = detectors[0]
            g = tcfg0.grid
            for b in frame.gt_boxes:
                if (g.x_range[0] <= b.x < g.x_range[1]
                        and g.y_range[0] <= b.y < g.y_range[1]):
                    all_gts.append((b, fid))
            fid += 1
    if not all_gts:
        raise DataError("no ground truth boxes in tracked scenes")
    if all_dets:
        result = evalmetrics.average_precision(all_dets, all_gts)
        mean_ap = result.mean_ap
    else:
        mean_ap = 0.0
    path = os.path.join(out_dir, "tracked.csv")
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["streams", "tracked_mean_ap"])
        wr.writerow(["+".join(",".join(d[1].modalities) for d in detectors),
                     f"{mean_ap:.6f}"])
    return {"mean_ap": mean_ap, "n_dets": len(all_dets), "n_gts": len(all_gts)}


# ---- argument parsing ----

def _add_common(p):
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a dotted config key, e.g. train.epochs=5")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--modality", default=None,
                   help="comma list: lidar,rgb,radar,depth")
    p.add_argument("--yaw-loss", choices=["sine", "simple"], default=None)
    p.add_argument("--weather", choices=sorted(WEATHER_PRESETS), default=None)


def _resolve_config(args):
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k] = v
    cfg = load_config(args.config, overrides)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.modality is not None:
        cfg["train"]["modalities"] = args.modality.split(",")
    if getattr(args, "yaw_loss", None):
        cfg["train"]["yaw_mode"] = args.yaw_loss
    if getattr(args, "weather", None):
        cfg["dataset"]["weather"] = args.weather
    return cfg


def _data_dir(args):
    d = args.data_dir or os.environ.get(ENV_DATA_ROOT)
    if not d:
        raise DataError("no data directory (flag or RVFUSION_DATA_ROOT)")
    return d


def main(argv=None):
    parser = argparse.ArgumentParser(prog="rvfusion")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset")
    _add_common(p)
    p.add_argument("out_dir")
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("train", help="train a detector")
    _add_common(p)
    p.add_argument("run_dir")
    p.add_argument("--data-dir", default=None)

    p = sub.add_parser("eval", help="evaluate a run")
    _add_common(p)
    p.add_argument("run_dir")
    p.add_argument("--data-dir", default=None)
    p.add_argument("--split", default="val")
    p.add_argument("--detector", choices=["network", "oracle", "empty"],
                   default="network")

    p = sub.add_parser("compare", help="train and compare modality variants")
    _add_common(p)
    p.add_argument("out_dir")
    p.add_argument("--data-dir", default=None)

    p = sub.add_parser("track", help="UKF late fusion over detector runs")
    _add_common(p)
    p.add_argument("out_dir")
    p.add_argument("--run-dir", action="append", required=True,
                   help="detector run dir (repeatable, one per stream)")
    p.add_argument("--data-dir", default=None)
    p.add_argument("--split", default="val")

    args = parser.parse_args(argv)
    try:
        cfg = _resolve_config(args)
        if args.command == "generate":
            m = cmd_generate(cfg, args.out_dir, force=args.force)
            print(f"wrote {len(m['scenes'])} scenes "
                  f"({m['counts']['train_scenes']} train / "
                  f"{m['counts']['val_scenes']} val) to {args.out_dir}")
        elif args.command == "train":
            r = cmd_train(cfg, _data_dir(args), args.run_dir)
            print(f"trained {len(r.curves)} epochs, "
                  f"best val mean AP {r.best_val_ap:.4f} "
                  f"(epoch {r.best_epoch})")
        elif args.command == "eval":
            r = cmd_eval(args.run_dir, _data_dir(args), args.split,
                         args.detector)
            print(f"mean AP {r.mean_ap:.4f}, AOE {r.aoe:.4f} rad "
                  f"({r.aoe_tp_count} TPs)")
        elif args.command == "compare":
            rows = cmd_compare(cfg, _data_dir(args), args.out_dir)
            for r in rows:
                print(f"{r['variant']:24s} mean AP {r['mean_ap']:.4f}")
        elif args.command == "track":
            r = cmd_track(cfg, args.run_dir, _data_dir(args), args.out_dir,
                          args.split)
            print(f"tracked mean AP {r['mean_ap']:.4f} "
                  f"({r['n_dets']} dets / {r['n_gts']} gts)")
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (DataError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except (FloatingPointError, np.linalg.LinAlgError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
