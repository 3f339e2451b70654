"""Procedural desk-scale scenes with exact depth, and posed sequence datasets.

Surfaces are Lambertian with no shading: a point's color is its albedo
(optionally modulated by a smooth sinusoidal pattern in world coordinates),
so any point seen from two cameras has the same RGB in both images.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import Intrinsics, SE3Pose, pixel_grid, pixel_rays, yaw_rotation

KINDS = ("sphere", "box", "plane")
_EPS = 1e-9


@dataclass(frozen=True, eq=False)
class ScenePrimitive:
    """A sphere (radius = extents[0]), an axis-aligned box (half extents), or a
    horizontal ground rectangle at height center[1] (half extents x, z; solid below,
    i.e. toward +y)."""

    kind: str
    center: np.ndarray
    extents: np.ndarray
    albedo: np.ndarray
    texture_amp: float = 0.0
    texture_period: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        c = np.asarray(self.center, dtype=np.float64).reshape(3)
        e = np.asarray(self.extents, dtype=np.float64).reshape(3)
        a = np.asarray(self.albedo, dtype=np.float64).reshape(3)
        if np.any(e <= 0):
            raise ValueError("extents must be positive")
        if np.any(a < 0) or np.any(a > 1):
            raise ValueError("albedo must lie in [0, 1]")
        if not 0 <= self.texture_amp <= 1 or self.texture_period <= 0:
            raise ValueError("bad texture parameters")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "extents", e)
        object.__setattr__(self, "albedo", a)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "center": self.center.tolist(),
            "extents": self.extents.tolist(),
            "albedo": self.albedo.tolist(),
            "texture_amp": self.texture_amp,
            "texture_period": self.texture_period,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScenePrimitive":
        return cls(**d)


@dataclass(eq=False)
class SceneSDF:
    primitives: list
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)

    def to_dict(self) -> dict:
        return {
            "primitives": [p.to_dict() for p in self.primitives],
            "background": self.background.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSDF":
        return cls([ScenePrimitive.from_dict(p) for p in d["primitives"]], d["background"])


def _hit_sphere(p, o, d):
    oc = o - p.center
    b = np.einsum("...i,...i->...", oc, d)
    c = np.einsum("...i,...i->...", oc, oc) - p.extents[0] ** 2
    disc = b * b - c
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t0, t1 = -b - sq, -b + sq
    t = np.where(t0 > _EPS, t0, np.where(t1 > _EPS, t1, np.inf))
    return np.where(ok, t, np.inf)


def _hit_box(p, o, d):
    lo, hi = p.center - p.extents, p.center + p.extents
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        ta = (lo - o) * inv
        tb = (hi - o) * inv
    tmin = np.minimum(ta, tb)
    tmax = np.maximum(ta, tb)
    # parallel rays: inside the slab -> unbounded, outside -> miss
    par = d == 0
    inside = (o >= lo) & (o <= hi)
    tmin = np.where(par, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(par, np.where(inside, np.inf, -np.inf), tmax)
    tn = tmin.max(axis=-1)
    tf = tmax.min(axis=-1)
    hit = tf >= np.maximum(tn, _EPS)
    t = np.where(tn > _EPS, tn, tf)
    return np.where(hit, t, np.inf)


def _hit_plane(p, o, d):
    dy = d[..., 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (p.center[1] - o[..., 1]) / dy
    t = np.where(np.abs(dy) > 1e-15, t, np.inf)
    x = o[..., 0] + t * d[..., 0]
    z = o[..., 2] + t * d[..., 2]
    within = (np.abs(x - p.center[0]) <= p.extents[0]) & (np.abs(z - p.center[2]) <= p.extents[2])
    return np.where((t > _EPS) & within, t, np.inf)


_HIT = {"sphere": _hit_sphere, "box": _hit_box, "plane": _hit_plane}


def intersect(scene: SceneSDF, origins, dirs):
    """Nearest positive hit distance and primitive index per ray (inf / -1 on miss)."""
    o = np.asarray(origins, dtype=np.float64)
    d = np.asarray(dirs, dtype=np.float64)
    best = np.full(o.shape[:-1], np.inf)
    ids = np.full(o.shape[:-1], -1, dtype=np.int64)
    for i, prim in enumerate(scene.primitives):
        t = _HIT[prim.kind](prim, o, d)
        closer = t < best
        best = np.where(closer, t, best)
        ids = np.where(closer, i, ids)
    return best, ids


def analytic_depth(scene: SceneSDF, ray) -> float | None:
    t, _ = intersect(scene, np.asarray(ray.origin)[None], np.asarray(ray.direction)[None])
    return float(t[0]) if np.isfinite(t[0]) else None


def albedo_at(scene: SceneSDF, points: np.ndarray, ids: np.ndarray) -> np.ndarray:
    out = np.broadcast_to(scene.background, points.shape).copy()
    for i, prim in enumerate(scene.primitives):
        sel = ids == i
        if not np.any(sel):
            continue
        col = np.broadcast_to(prim.albedo, points[sel].shape).copy()
        if prim.texture_amp > 0:
            q = points[sel] * (2 * math.pi / prim.texture_period)
            pattern = (np.sin(q[:, 0]) + np.sin(q[:, 1] + 1.0) + np.sin(q[:, 2] + 2.0)) / 3.0
            col = col * (1.0 + prim.texture_amp * pattern[:, None])
        out[sel] = np.clip(col, 0.0, 1.0)
    return out


def render_gt(scene: SceneSDF, K: Intrinsics, pose: SE3Pose, return_ids: bool = False):
    """RGB (H, W, 3) in [0, 1] and range image (H, W) with 0 marking misses."""
    o, d = pixel_rays(K, pose, pixel_grid(K))
    t, ids = intersect(scene, o, d)
    hit = np.isfinite(t)
    pts = o + d * np.where(hit, t, 0.0)[..., None]
    rgb = albedo_at(scene, pts, ids)
    depth = np.where(hit, t, 0.0)
    if return_ids:
        return rgb, depth, ids
    return rgb, depth


def scene_sdf(scene: SceneSDF, points: np.ndarray) -> np.ndarray:
    """Signed distance (negative inside) to the union of primitives."""
    pts = np.asarray(points, dtype=np.float64)
    out = np.full(pts.shape[:-1], np.inf)
    for prim in scene.primitives:
        q = pts - prim.center
        if prim.kind == "sphere":
            s = np.linalg.norm(q, axis=-1) - prim.extents[0]
        elif prim.kind == "box":
            a = np.abs(q) - prim.extents
            s = np.linalg.norm(np.maximum(a, 0.0), axis=-1) + np.minimum(a.max(axis=-1), 0.0)
        else:
            # slab of unbounded depth below the ground rectangle
            ext = np.array([prim.extents[0], np.inf, prim.extents[2]])
            a = np.abs(q) - ext
            a[..., 1] = -q[..., 1]
            s = np.linalg.norm(np.maximum(a, 0.0), axis=-1) + np.minimum(a.max(axis=-1), 0.0)
        out = np.minimum(out, s)
    return out


def default_scene(
    seed: int = 0,
    n_objects: int = 4,
    camera_height: float = 1.5,
    backdrop: bool = True,
    object_depth=(6.5, 12.0),
) -> SceneSDF:
    """Ground rectangle plus ``n_objects`` boxes/spheres resting on it, their
    centers ``object_depth`` meters ahead.

    With ``backdrop`` a textured wall closes the scene 18 m ahead, so every
    pixel of the default camera path sees a surface (no empty background).
    """
    if not 3 <= n_objects <= 6:
        raise ValueError("n_objects must be in [3, 6]")
    rng = np.random.default_rng(seed)
    prims = [
        ScenePrimitive(
            "plane",
            [0.0, camera_height, 8.0],
            [18.0, 1.0, 10.0],
            [0.55, 0.5, 0.42],
            texture_amp=0.35,
            texture_period=2.5,
        )
    ]
    placed = []
    lanes = np.linspace(-3.2, 3.2, n_objects)
    rng.shuffle(lanes)
    for lane in lanes:
        for _ in range(100):
            size = rng.uniform(0.45, 0.9)
            x = lane + rng.uniform(-0.3, 0.3)
            z = rng.uniform(*object_depth)
            if all(math.hypot(x - px, z - pz) > size + ps + 0.4 for px, pz, ps in placed):
                break
        placed.append((x, z, size))
        albedo = rng.uniform(0.25, 0.95, size=3)
        if rng.uniform() < 0.5:
            prims.append(
                ScenePrimitive(
                    "sphere", [x, camera_height - size, z], [size] * 3, albedo,
                    texture_amp=0.3, texture_period=1.5,
                )
            )
        else:
            h = rng.uniform(0.5, 1.2)
            prims.append(
                ScenePrimitive(
                    "box", [x, camera_height - h, z], [size, h, size], albedo,
                    texture_amp=0.3, texture_period=1.5,
                )
            )
    if backdrop:
        top = -12.0
        prims.append(
            ScenePrimitive(
                "box", [0.0, 0.5 * (top + camera_height), 18.25], [22.0, 0.5 * (camera_height - top), 0.25],
                [0.45, 0.55, 0.7], texture_amp=0.3, texture_period=3.0,
            )
        )
    return SceneSDF(prims, np.zeros(3))


@dataclass(eq=False)
class SequenceSpec:
    camera: Intrinsics
    trajectory: list
    heldout: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.trajectory) < 2:
            raise ValueError("a sequence needs at least two frames")
        for a, b in zip(self.trajectory, self.trajectory[1:]):
            if a.allclose(b, atol=1e-12):
                raise ValueError("consecutive poses must differ")

    @property
    def n_frames(self) -> int:
        return len(self.trajectory)


def default_camera(width: int = 64, height: int = 48, focal: float = 48.0) -> Intrinsics:
    return Intrinsics(focal, focal, (width - 1) / 2.0, (height - 1) / 2.0, width, height)


def forward_trajectory(n_frames: int, step: float = 0.4, yaw_jitter_deg: float = 3.0,
                       lateral_jitter: float = 0.15, seed: int = 0) -> list:
    """Forward path along +z; the first pose is the identity (world = input camera)."""
    rng = np.random.default_rng(seed)
    poses = [SE3Pose.identity()]
    for i in range(1, n_frames):
        yaw = rng.uniform(-yaw_jitter_deg, yaw_jitter_deg)
        lat = rng.uniform(-lateral_jitter, lateral_jitter)
        poses.append(SE3Pose(yaw_rotation(yaw), [lat, 0.0, i * step]))
    return poses


def default_heldout(step: float = 0.4, n_frames: int = 12) -> list:
    """Three novel poses in between training frames, off the training path."""
    span = step * (n_frames - 1)
    return [
        SE3Pose(yaw_rotation(6.0), [0.3, 0.0, 0.25 * span]),
        SE3Pose(yaw_rotation(-5.0), [-0.3, 0.0, 0.5 * span]),
        SE3Pose(yaw_rotation(8.0), [0.1, 0.0, 0.75 * span]),
    ]


def default_sequence(n_frames: int = 12, seed: int = 0) -> SequenceSpec:
    return SequenceSpec(default_camera(), forward_trajectory(n_frames, seed=seed), default_heldout(n_frames=n_frames))


def _write_frame(root: Path, name: str, rgb: np.ndarray, depth: np.ndarray):
    rgb_path = root / "rgb" / f"{name}.png"
    depth_path = root / "depth" / f"{name}.bin"
    try:
        Image.fromarray(np.round(rgb * 255.0).astype(np.uint8)).save(rgb_path, format="PNG")
        depth.astype("<f4").tofile(depth_path)
    except OSError as exc:
        raise OSError(f"failed writing frame {name} under {root}: {exc}") from exc
    return f"rgb/{name}.png", f"depth/{name}.bin"


def generate_sequence(scene: SceneSDF, spec: SequenceSpec, out_dir, seed: int = 0) -> Path:
    """Render every pose and write manifest.json, rgb/%04d.png and depth/%04d.bin.

    Held-out poses are appended after the training frames and tagged as such.
    """
    root = Path(out_dir)
    try:
        (root / "rgb").mkdir(parents=True, exist_ok=True)
        (root / "depth").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {root}: {exc}") from exc
    K = spec.camera
    frames = []
    poses = [(p, "train") for p in spec.trajectory] + [(p, "heldout") for p in spec.heldout]
    for i, (pose, split) in enumerate(poses):
        rgb, depth = render_gt(scene, K, pose)
        rgb_name, depth_name = _write_frame(root, f"{i:04d}", rgb, depth)
        frames.append(
            {
                "index": i,
                "split": split,
                "pose": pose.matrix.reshape(-1).tolist(),
                "rgb": rgb_name,
                "depth": depth_name,
            }
        )
    manifest = {
        "version": 1,
        "seed": seed,
        "intrinsics": K.as_list(),
        "image_size": [K.width, K.height],
        "frames": frames,
        "scene": scene.to_dict(),
    }
    try:
        (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    except OSError as exc:
        raise OSError(f"failed writing {root / 'manifest.json'}: {exc}") from exc
    return root


@dataclass(eq=False)
class Frame:
    index: int
    split: str
    pose: SE3Pose
    rgb: np.ndarray
    depth: np.ndarray


@dataclass(eq=False)
class Dataset:
    root: Path
    camera: Intrinsics
    frames: list
    scene: SceneSDF | None

    @property
    def train(self) -> list:
        return [f for f in self.frames if f.split == "train"]

    @property
    def heldout(self) -> list:
        return [f for f in self.frames if f.split == "heldout"]


def load_dataset(path) -> Dataset:
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise OSError(f"cannot read dataset manifest in {root}: {exc}") from exc
    K = Intrinsics.from_list(manifest["intrinsics"])
    frames = []
    for fr in manifest["frames"]:
        rgb = np.asarray(Image.open(root / fr["rgb"]).convert("RGB"), dtype=np.float64) / 255.0
        depth = np.fromfile(root / fr["depth"], dtype="<f4").astype(np.float64)
        frames.append(
            Frame(fr["index"], fr["split"], SE3Pose.from_matrix(fr["pose"]), rgb,
                  depth.reshape(K.height, K.width))
        )
    scene = SceneSDF.from_dict(manifest["scene"]) if "scene" in manifest else None
    return Dataset(root, K, frames, scene)
