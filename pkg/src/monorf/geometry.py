"""Pinhole cameras, rigid poses, rays and the latitude-longitude sphere mapping.

Image convention: x right, y down, z forward. Pixel centers sit at integer
coordinates. Depth values handed around this package are ranges, i.e. the
distance from the camera center along the unit ray.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def as_list(self) -> list:
        return [self.fx, self.fy, self.cx, self.cy, self.width, self.height]

    @classmethod
    def from_list(cls, values) -> "Intrinsics":
        fx, fy, cx, cy, w, h = values
        return cls(float(fx), float(fy), float(cx), float(cy), int(w), int(h))

    def scaled(self, factor: float) -> "Intrinsics":
        """Intrinsics for an image resampled by ``factor`` (pixel centers kept)."""
        w = max(1, int(round(self.width * factor)))
        h = max(1, int(round(self.height * factor)))
        return Intrinsics(
            self.fx * factor,
            self.fy * factor,
            (self.cx + 0.5) * factor - 0.5,
            (self.cy + 0.5) * factor - 0.5,
            w,
            h,
        )


@dataclass(frozen=True, eq=False)
class SE3Pose:
    """Camera-to-world rigid transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-6) or abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise ValueError("rotation must be orthonormal with det +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "SE3Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "SE3Pose":
        m = np.asarray(m, dtype=np.float64).reshape(4, 4)
        return cls(m[:3, :3], m[:3, 3])

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "SE3Pose":
        rt = self.rotation.T
        return SE3Pose(rt, -rt @ self.translation)

    def __matmul__(self, other: "SE3Pose") -> "SE3Pose":
        return SE3Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def apply_rotation(self, vectors: np.ndarray) -> np.ndarray:
        return np.asarray(vectors) @ self.rotation.T

    def allclose(self, other: "SE3Pose", atol: float = 1e-9) -> bool:
        return np.allclose(self.matrix, other.matrix, atol=atol)


def yaw_rotation(degrees: float) -> np.ndarray:
    """Rotation about the camera's vertical (y) axis; positive turns toward +x."""
    a = math.radians(degrees)
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray


def pixel_rays(K: Intrinsics, pose: SE3Pose, pixels: np.ndarray):
    """World-frame origins and unit directions for an ``(..., 2)`` pixel array."""
    pixels = np.asarray(pixels, dtype=np.float64)
    if not np.all(np.isfinite(pixels)):
        raise ValueError("pixel coordinates must be finite")
    rx = (pixels[..., 0] - K.cx) / K.fx
    ry = (pixels[..., 1] - K.cy) / K.fy
    cam = np.stack([rx, ry, np.ones_like(rx)], axis=-1)
    dirs = pose.apply_rotation(cam)
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(pose.translation, dirs.shape).copy()
    return origins, dirs


def ray_for_pixel(K: Intrinsics, pose: SE3Pose, pixel) -> Ray:
    o, d = pixel_rays(K, pose, np.asarray(pixel, dtype=np.float64).reshape(1, 2))
    return Ray(o[0], d[0])


def pixel_grid(K: Intrinsics) -> np.ndarray:
    """All pixel centers as an (H, W, 2) array of (x, y)."""
    xs, ys = np.meshgrid(np.arange(K.width, dtype=np.float64), np.arange(K.height, dtype=np.float64))
    return np.stack([xs, ys], axis=-1)


def direction_to_spherical(v: np.ndarray):
    """(theta, phi) of camera-frame vectors.

    For z > 0 this equals the pixel mapping below; elsewhere it is the
    continuous extension, with theta leaving (0, pi) behind the camera.
    """
    v = np.asarray(v)
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    norm = np.sqrt(x * x + y * y + z * z)
    theta = np.pi - np.arctan2(z, x)
    phi = np.arccos(np.clip(-y / np.maximum(norm, 1e-300), -1.0, 1.0))
    return theta, phi


def spherical_project(pixels, K: Intrinsics):
    """Latitude-longitude coordinates (theta, phi) of pixels.

    ``theta = pi - atan2(1, r_x)`` and ``phi = arccos(-r_y / r)`` with
    ``[r_x, r_y, 1] ~ K^-1 [x, y, 1]``.
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    rx = (pixels[..., 0] - K.cx) / K.fx
    ry = (pixels[..., 1] - K.cy) / K.fy
    r = np.sqrt(rx * rx + ry * ry + 1.0)
    theta = np.pi - np.arctan2(1.0, rx)
    phi = np.arccos(-ry / r)
    return theta, phi


def spherical_to_direction(theta, phi) -> np.ndarray:
    """Inverse of the pixel mapping: the ray (r_x, r_y, 1) for theta, phi in (0, pi)."""
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    rx = -1.0 / np.tan(theta)
    ry = -np.sqrt(1.0 + rx * rx) / np.tan(phi)
    return np.stack([rx, ry, np.ones_like(rx)], axis=-1)


@dataclass(frozen=True)
class SphericalFov:
    theta_min: float
    theta_max: float
    phi_min: float
    phi_max: float

    def __post_init__(self):
        if not (self.theta_min < self.theta_max and self.phi_min < self.phi_max):
            raise ValueError("fov bounds must be strictly ordered")

    def as_list(self) -> list:
        return [self.theta_min, self.theta_max, self.phi_min, self.phi_max]


def image_fov(K: Intrinsics) -> SphericalFov:
    """Bounding box in (theta, phi) of the image's pixel-center border."""
    w, h = K.width - 1, K.height - 1
    xs = np.linspace(0, w, 4 * K.width)
    ys = np.linspace(0, h, 4 * K.height)
    border = np.concatenate(
        [
            np.stack([xs, np.zeros_like(xs)], -1),
            np.stack([xs, np.full_like(xs, h)], -1),
            np.stack([np.zeros_like(ys), ys], -1),
            np.stack([np.full_like(ys, w), ys], -1),
        ]
    )
    theta, phi = spherical_project(border, K)
    return SphericalFov(theta.min(), theta.max(), phi.min(), phi.max())


def enlarged_fov(K: Intrinsics, extra_deg: float = 40.0) -> SphericalFov:
    """Input FOV widened by ``extra_deg`` in total along both axes, kept inside (0, pi)."""
    base = image_fov(K)
    pad = math.radians(extra_deg) / 2.0
    eps = 1e-3
    return SphericalFov(
        max(base.theta_min - pad, eps),
        min(base.theta_max + pad, math.pi - eps),
        max(base.phi_min - pad, eps),
        min(base.phi_max + pad, math.pi - eps),
    )


def spherical_to_grid(theta, phi, fov: SphericalFov, grid_hw):
    """Affine map to continuous grid coordinates (col, row) plus an inside flag."""
    hs, ws = grid_hw
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    col = (theta - fov.theta_min) / (fov.theta_max - fov.theta_min) * (ws - 1)
    row = (phi - fov.phi_min) / (fov.phi_max - fov.phi_min) * (hs - 1)
    # snap round-off just past the border back onto it
    col = np.where((col < 0) & (col > -1e-9), 0.0, np.where((col > ws - 1) & (col < ws - 1 + 1e-9), ws - 1.0, col))
    row = np.where((row < 0) & (row > -1e-9), 0.0, np.where((row > hs - 1) & (row < hs - 1 + 1e-9), hs - 1.0, row))
    inside = (col >= 0) & (col <= ws - 1) & (row >= 0) & (row <= hs - 1)
    inside &= (theta > 0) & (theta < np.pi)
    return col, row, inside


def grid_to_spherical(col, row, fov: SphericalFov, grid_hw):
    hs, ws = grid_hw
    theta = fov.theta_min + np.asarray(col) / (ws - 1) * (fov.theta_max - fov.theta_min)
    phi = fov.phi_min + np.asarray(row) / (hs - 1) * (fov.phi_max - fov.phi_min)
    return theta, phi


def project_points(K: Intrinsics, pose: SE3Pose, points: np.ndarray):
    """Project world points; returns pixel coords, camera-frame z, and an in-image flag."""
    cam = pose.inverse().apply(points)
    z = cam[..., 2]
    safe = np.where(np.abs(z) > 1e-12, z, 1e-12)
    x = K.fx * cam[..., 0] / safe + K.cx
    y = K.fy * cam[..., 1] / safe + K.cy
    valid = (z > 1e-9) & (x >= 0) & (x <= K.width - 1) & (y >= 0) & (y <= K.height - 1)
    return np.stack([x, y], axis=-1), z, valid


def reproject(pixels, depth, pose_src: SE3Pose, pose_tgt: SE3Pose, K: Intrinsics):
    """Map source pixels with range ``depth`` into the target image.

    Returns continuous target coordinates and a validity flag (in bounds and in
    front of the target camera).
    """
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0):
        raise ValueError("depth must be positive")
    o, d = pixel_rays(K, pose_src, pixels)
    world = o + d * depth[..., None]
    xy, _, valid = project_points(K, pose_tgt, world)
    return xy, valid
