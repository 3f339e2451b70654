"""Photometric and reprojection losses with their depth/color gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Intrinsics, SE3Pose

MASK_TIE_TOL = 1e-9


def rgb_loss(pred, gt):
    """Mean squared error over rays and channels; returns (loss, d pred)."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    diff = pred - gt
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def bilinear_image(image: np.ndarray, xy: np.ndarray):
    """Clamp-to-edge bilinear lookup; returns values (P, C) and d/dx, d/dy (P, C)."""
    h, w = image.shape[:2]
    x = np.clip(xy[:, 0], 0, w - 1)
    y = np.clip(xy[:, 1], 0, h - 1)
    x0 = np.minimum(np.floor(x).astype(np.int64), max(w - 2, 0))
    y0 = np.minimum(np.floor(y).astype(np.int64), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    i00, i01 = image[y0, x0], image[y0, x1]
    i10, i11 = image[y1, x0], image[y1, x1]
    top = (1 - fx) * i00 + fx * i01
    bot = (1 - fx) * i10 + fx * i11
    val = (1 - fy) * top + fy * bot
    ddx = (1 - fy) * (i01 - i00) + fy * (i11 - i10)
    ddy = bot - top
    return val, ddx, ddy


@dataclass(eq=False)
class ReprojResult:
    loss: float
    d_depth: np.ndarray
    mask: np.ndarray
    warped_err: np.ndarray
    identity_err: np.ndarray
    empty: bool


def reproj_loss(pixels, origins, dirs, depth, weight_sum, src_image, tgt_image,
                pose_tgt: SE3Pose, K: Intrinsics, min_weight: float = 0.5, mask=None) -> ReprojResult:
    """Channel-mean L1 between source pixels and the target image sampled at
    their reprojection, averaged over kept pixels.

    A pixel is kept when its reprojection is valid (in bounds, in front of the
    target camera), its ray weight sum reaches ``min_weight``, and auto-masking
    does not drop it: pixels whose unwarped error is strictly smaller than the
    warped error are dropped (differences below ``MASK_TIE_TOL`` count as ties,
    so round-off in the warp cannot flip the decision). ``mask`` overrides the computed keep-mask. Rays
    and poses must share one frame; gradients flow to ``depth`` only.
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    depth = np.asarray(depth)
    n = depth.shape[0]
    src = bilinear_image(src_image, pixels)[0]
    ident = bilinear_image(tgt_image, pixels)[0]
    identity_err = np.abs(src - ident).mean(axis=1)

    world = origins + dirs * depth[:, None]
    rt = pose_tgt.rotation.T
    cam = (world - pose_tgt.translation) @ rt.T
    z = cam[:, 2]
    safe_z = np.where(np.abs(z) > 1e-9, z, 1e-9)
    xy = np.stack([K.fx * cam[:, 0] / safe_z + K.cx, K.fy * cam[:, 1] / safe_z + K.cy], axis=1)
    tol = 1e-6  # pixels; border pixels reprojected by a near-identity pose stay in bounds
    valid = ((z > 1e-6) & (xy[:, 0] >= -tol) & (xy[:, 0] <= K.width - 1 + tol)
             & (xy[:, 1] >= -tol) & (xy[:, 1] <= K.height - 1 + tol))
    finite = np.isfinite(xy).all(axis=1)
    valid &= finite
    xy = np.where(finite[:, None], xy, 0.0)  # keeps the lookup in range; such pixels are never kept
    warped, ddx, ddy = bilinear_image(tgt_image, xy)
    diff = src - warped
    warped_err = np.abs(diff).mean(axis=1)

    if mask is None:
        mask = valid & (np.asarray(weight_sum) >= min_weight) & ~(identity_err < warped_err - MASK_TIE_TOL)
    count = int(mask.sum())
    d_depth = np.zeros(n, dtype=depth.dtype)
    if count == 0:
        return ReprojResult(0.0, d_depth, mask, warped_err, identity_err, True)
    loss = float(warped_err[mask].sum() / count)

    # d warped_err / d depth through the projection
    v = dirs @ rt.T
    dx = K.fx * (v[:, 0] * safe_z - cam[:, 0] * v[:, 2]) / (safe_z * safe_z)
    dy = K.fy * (v[:, 1] * safe_z - cam[:, 1] * v[:, 2]) / (safe_z * safe_z)
    dwarp = ddx * dx[:, None] + ddy * dy[:, None]
    derr = (-np.sign(diff) * dwarp).mean(axis=1)
    d_depth[mask] = (derr[mask] / count).astype(d_depth.dtype, copy=False)
    return ReprojResult(loss, d_depth, mask, warped_err, identity_err, False)
