"""``monorf`` command line: gen-data, train, render, reconstruct, eval.

Exit status is 0 on success, 2 for configuration/usage errors and 3 for
runtime failures; failures print a single ``error:`` line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import re
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .checkpoint import CheckpointError, load_checkpoint, read_header, save_checkpoint
from .config import Config, ConfigError, dump_toml, from_dict, load_config
from .geometry import SE3Pose, yaw_rotation
from .metrics import depth_metrics, occ_metrics, psnr, ssim
from .model import render_view
from .recon import (
    analytic_occupancy,
    novel_pose_schedule,
    reconstruct,
    save_occupancy,
    save_volume,
    write_ply,
)
from .scenegen import SequenceSpec, default_camera, default_heldout, default_scene, forward_trajectory
from .scenegen import generate_sequence, load_dataset
from .train import TrainingError, train

log = logging.getLogger("monorf")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
CHECKPOINT_NAME = "checkpoint.bin"

_POSE_RE = re.compile(r"^\s*([+-]?\d+(?:\.\d+)?)\s*m\s*,\s*([+-]?\d+(?:\.\d+)?)\s*(?:°|deg)?\s*$")


def parse_pose_spec(text: str) -> tuple:
    """``"+1m,-10°"`` -> (1.0, -10.0): forward offset along the input camera's
    optical axis in meters, then yaw in degrees."""
    m = _POSE_RE.match(text)
    if not m:
        raise ConfigError(f"bad pose spec {text!r}; expected e.g. '+1m,0°' or '+0.5m,-10deg'")
    return float(m.group(1)), float(m.group(2))


def pose_from_spec(input_pose: SE3Pose, forward: float, yaw_deg: float) -> SE3Pose:
    return input_pose @ SE3Pose(yaw_rotation(yaw_deg), [0.0, 0.0, forward])


def _model_config_from_checkpoint(header: dict, cfg: Config) -> Config:
    """Model/training keys come from the checkpoint snapshot; scheme and eval
    keys stay as given on this invocation."""
    snap = from_dict(header["config"])
    scheme_keys = {"pose_step", "max_dist", "yaws", "include_origin", "volume_origin", "voxel_size", "volume_dims",
                   "truncation_voxels", "occ_slope", "occ_cap", "fusion", "render_scale", "depth_cap", "seed"}
    return snap.replace(**{k: v for k, v in cfg.to_dict().items() if k in scheme_keys})


# --- commands ---------------------------------------------------------------


def cmd_gen_data(cfg: Config, out: Path) -> Path:
    scene = default_scene(cfg.seed, cfg.n_objects)
    K = default_camera(cfg.image_width, cfg.image_height, cfg.focal)
    traj = forward_trajectory(cfg.n_frames, cfg.frame_step, cfg.yaw_jitter, cfg.lateral_jitter, cfg.seed)
    spec = SequenceSpec(K, traj, default_heldout(cfg.frame_step, cfg.n_frames))
    generate_sequence(scene, spec, out, cfg.seed)
    (out / "config.toml").write_text(dump_toml(cfg))
    return out


def cmd_train(cfg: Config, data: Path, out: Path, resume: bool = False, threads: int = 1) -> Path:
    ds = load_dataset(data)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / CHECKPOINT_NAME
    state = None
    if resume and ckpt.exists():
        state, header = load_checkpoint(ckpt)
        if header["rng"]["seed"] != cfg.seed or from_dict(header["config"]).model() != cfg.model():
            raise ConfigError("resume: checkpoint was written with a different seed or model config")
        log.info("resuming from epoch %d", state.epoch)
    snapshot = cfg.to_dict()

    def on_epoch(st):
        save_checkpoint(ckpt, st, snapshot, cfg.seed)

    def progress(st, rows):
        last = [r for r in rows if r["epoch"] == st.epoch - 1]
        if last:
            log.info("epoch %d  l_total %.5f", st.epoch, np.mean([r["l_total"] for r in last]))

    state, _ = train(ds, cfg.model(), cfg.train(), state=state, checkpoint_fn=on_epoch,
                     log_path=out / "loss_log.csv", threads=threads, progress=progress)
    save_checkpoint(ckpt, state, snapshot, cfg.seed)
    return ckpt


def _load_model(checkpoint: Path, cfg: Config):
    state, header = load_checkpoint(checkpoint)
    return state, _model_config_from_checkpoint(header, cfg)


def save_depth_png(depth: np.ndarray, path: Path, valid=None):
    """16-bit PNG in millimeters; 0 marks invalid pixels."""
    mm = np.round(np.asarray(depth) * 1000.0)
    ok = np.isfinite(mm) & (mm > 0)
    if valid is not None:
        ok &= valid
    mm = np.where(ok, np.clip(mm, 1, 65535), 0).astype(np.uint16)
    Image.fromarray(mm).save(path, format="PNG")


def load_depth_png(path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.float64) / 1000.0


def cmd_render(cfg: Config, checkpoint: Path, data: Path, pose_spec: str, out: Path, threads: int = 1) -> dict:
    forward, yaw = parse_pose_spec(pose_spec)
    state, mcfg = _load_model(checkpoint, cfg)
    ds = load_dataset(data)
    inp = ds.train[0]
    pose = pose_from_spec(inp.pose, forward, yaw)
    v = render_view(state.params, mcfg.model(), inp.rgb, ds.camera, inp.pose, pose, seed=cfg.seed, threads=threads)
    out.mkdir(parents=True, exist_ok=True)
    depth = np.where(v.valid, v.depth, 0.0)
    save_depth_png(depth, out / "depth.png")
    Image.fromarray(np.round(np.clip(v.rgb, 0, 1) * 255).astype(np.uint8)).save(out / "rgb.png", format="PNG")
    depth.astype("<f4").tofile(out / "depth.bin")
    meta = {"pose_spec": pose_spec, "forward_m": forward, "yaw_deg": yaw, "pose": pose.matrix.reshape(-1).tolist(),
            "width": ds.camera.width, "height": ds.camera.height, "depth_bin": "float32-le meters, 0 = invalid"}
    (out / "render.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return meta


def run_reconstruction(cfg: Config, checkpoint: Path, data: Path, threads: int = 1):
    state, mcfg = _load_model(checkpoint, cfg)
    ds = load_dataset(data)
    inp = ds.train[0]
    return reconstruct(state.params, mcfg.model(), inp.rgb, ds.camera, inp.pose, cfg.scheme(),
                       seed=cfg.seed, threads=threads), ds


def cmd_reconstruct(cfg: Config, checkpoint: Path, data: Path, out: Path, threads: int = 1) -> dict:
    rec, _ = run_reconstruction(cfg, checkpoint, data, threads)
    out.mkdir(parents=True, exist_ok=True)
    save_volume(rec.tsdf, out / "tsdf.bin")
    save_occupancy(rec.occupancy, out / "occupancy.bin")
    write_ply(rec.mesh, out / "mesh.ply")
    summary = {"poses": len(rec.poses), "occupied_voxels": int(rec.occupancy.occupied.sum()),
               "valid_voxels": int(rec.tsdf.valid.sum()), "vertices": len(rec.mesh.vertices),
               "triangles": len(rec.mesh.triangles)}
    (out / "reconstruct.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary


def gt_occupancy(cfg: Config, ds):
    if ds.scene is None:
        raise ValueError("dataset manifest has no scene description; cannot build ground-truth occupancy")
    scheme = cfg.scheme()
    inp = ds.train[0]
    poses = novel_pose_schedule(inp.pose, scheme.pose_step, scheme.max_dist, scheme.yaws_deg, scheme.include_origin)
    return analytic_occupancy(ds.scene, poses, ds.camera, scheme.volume, scheme.truncation, inp.pose)


def evaluate(cfg: Config, ds, predict, occupancy=None) -> dict:
    """``predict(frame) -> (depth, rgb or None, valid)``; returns the metric report."""
    rows = []
    inp = ds.train[0]
    for f in ds.heldout:
        depth, rgb, valid = predict(f)
        row = {"frame": f.index, "distance_m": float(np.linalg.norm(f.pose.translation - inp.pose.translation))}
        dm = depth_metrics(depth, f.depth, valid, cap=cfg.depth_cap)
        row.update(dm.as_dict())
        if rgb is not None:
            row["psnr"] = psnr(np.clip(rgb, 0, 1), f.rgb)
            row["ssim"] = ssim(np.clip(rgb, 0, 1), f.rgb)
        rows.append(row)
    keys = ("abs_rel", "sq_rel", "rmse", "rmse_log", "d1", "d2", "d3", "psnr", "ssim")
    mean = {k: float(np.mean([r[k] for r in rows])) for k in keys if all(k in r for r in rows)}
    report = {"heldout": rows, "mean": mean}
    if occupancy is not None:
        report["occupancy"] = occ_metrics(occupancy, gt_occupancy(cfg, ds)).as_dict()
    return report


def cmd_eval(cfg: Config, data: Path, out: Path, checkpoint: Path | None = None, pred_dir: Path | None = None,
             recon_dir: Path | None = None, threads: int = 1) -> dict:
    ds = load_dataset(data)
    if (checkpoint is None) == (pred_dir is None):
        raise ConfigError("eval needs exactly one of --checkpoint or --pred-dir")
    occupancy = None
    if checkpoint is not None:
        state, mcfg = _load_model(checkpoint, cfg)
        inp = ds.train[0]
        from .encoder import encode

        model = mcfg.model()
        grid, _ = encode(state.params, model.encoder, inp.rgb, ds.camera)

        def predict(f):
            v = render_view(state.params, model, inp.rgb, ds.camera, inp.pose, f.pose, seed=cfg.seed,
                            stream=f.index, threads=threads, grid=grid)
            return v.depth, v.rgb, v.valid

        if recon_dir is None:
            rec, _ = run_reconstruction(cfg, checkpoint, data, threads)
            occupancy = rec.occupancy
    else:
        def predict(f):
            d = np.fromfile(pred_dir / "depth" / f"{f.index:04d}.bin", dtype="<f4").astype(np.float64)
            d = d.reshape(ds.camera.height, ds.camera.width)
            rgb_path = pred_dir / "rgb" / f"{f.index:04d}.png"
            rgb = np.asarray(Image.open(rgb_path).convert("RGB"), dtype=np.float64) / 255.0 if rgb_path.exists() else None
            return d, rgb, d > 0

    if recon_dir is not None:
        from .recon import load_grid

        occ, _ = load_grid(recon_dir / "occupancy.bin")
        occupancy = occ > 0.5
    report = evaluate(cfg, ds, predict, occupancy)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    with open(out / "metrics.csv", "w", newline="") as fh:
        fieldnames = list(report["heldout"][0].keys())
        w = csv.DictWriter(fh, fieldnames=fieldnames)
        w.writeheader()
        w.writerows(report["heldout"])
    return report


# --- argument parsing -------------------------------------------------------


def _seed(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _threads(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("--threads must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat TOML config file")
    common.add_argument("--seed", type=_seed, help="overrides the config seed")
    common.add_argument("--threads", type=_threads, default=1, help="worker threads (results do not depend on it)")
    common.add_argument("--out", type=Path, required=True, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="monorf", description="Single-image radiance field toy pipeline.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="render the synthetic dataset")
    t = sub.add_parser("train", parents=[common], help="train on a dataset")
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.bin if present")
    t.add_argument("--epochs", type=int, help="overrides the config epochs")
    r = sub.add_parser("render", parents=[common], help="render depth/RGB at a novel pose")
    r.add_argument("--checkpoint", type=Path, required=True)
    r.add_argument("--data", type=Path, required=True)
    r.add_argument("--pose", required=True, help="e.g. '+1m,0°' (forward meters, yaw degrees)")
    c = sub.add_parser("reconstruct", parents=[common], help="fuse novel depths into TSDF/occupancy/mesh")
    c.add_argument("--checkpoint", type=Path, required=True)
    c.add_argument("--data", type=Path, required=True)
    e = sub.add_parser("eval", parents=[common], help="held-out depth/view metrics and occupancy IoU")
    e.add_argument("--data", type=Path, required=True)
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", type=Path)
    src.add_argument("--pred-dir", type=Path, help="directory with depth/NNNN.bin (and rgb/NNNN.png) predictions")
    e.add_argument("--recon-dir", type=Path, help="use OUT of a previous reconstruct run for occupancy")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        overrides = {"seed": args.seed}
        if args.command == "train":
            overrides["epochs"] = args.epochs
        cfg = load_config(args.config, overrides)
        out = args.out
        if args.command == "gen-data":
            cmd_gen_data(cfg, out)
        elif args.command == "train":
            cmd_train(cfg, args.data, out, resume=args.resume, threads=args.threads)
        elif args.command == "render":
            cmd_render(cfg, args.checkpoint, args.data, args.pose, out, threads=args.threads)
        elif args.command == "reconstruct":
            cmd_reconstruct(cfg, args.checkpoint, args.data, out, threads=args.threads)
        elif args.command == "eval":
            report = cmd_eval(cfg, args.data, out, checkpoint=args.checkpoint, pred_dir=args.pred_dir,
                              recon_dir=args.recon_dir, threads=args.threads)
            print(json.dumps(report["mean"] | ({"iou": report["occupancy"]["iou"]} if "occupancy" in report else {})))
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, TrainingError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
