"""Image encoder producing a feature grid over latitude-longitude coordinates.

Three stride-2 planar convolutions, a gather onto a uniform (theta, phi) grid
that covers a wider field of view than the image, then two 3x3 convolutions
on the sphere grid so cells outside the input view pick up features from
their neighbours.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
from numpy.lib.stride_tricks import sliding_window_view

from .geometry import (
    Intrinsics,
    SphericalFov,
    direction_to_spherical,
    enlarged_fov,
    grid_to_spherical,
    spherical_to_direction,
    spherical_to_grid,
)


@dataclass(frozen=True)
class EncoderConfig:
    channels: tuple = (8, 16, 32)
    grid_hw: tuple = (64, 64)
    fov_extra_deg: float = 40.0
    wrap_theta: bool = False

    @property
    def out_channels(self) -> int:
        return self.channels[-1]

    @property
    def stride(self) -> int:
        return 2 ** len(self.channels)


@dataclass(eq=False)
class FeatureGrid:
    data: np.ndarray  # (H_s, W_s, C)
    fov: SphericalFov

    @property
    def hw(self):
        return self.data.shape[:2]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


def init_encoder_params(rng: np.random.Generator, cfg: EncoderConfig) -> dict:
    params = {}
    cin = 3
    for i, cout in enumerate(cfg.channels):
        bound = np.sqrt(6.0 / (cin * 9))
        params[f"enc.p{i}.w"] = rng.uniform(-bound, bound, size=(cin, 3, 3, cout))
        params[f"enc.p{i}.b"] = np.zeros(cout)
        cin = cout
    for i in range(2):
        bound = np.sqrt(6.0 / (cin * 9))
        params[f"enc.s{i}.w"] = rng.uniform(-bound, bound, size=(cin, 3, 3, cin))
        params[f"enc.s{i}.b"] = np.zeros(cin)
    return params


# --- convolutions ---------------------------------------------------------


def _pad(x, mode_rows: str, mode_cols: str):
    x = np.pad(x, ((1, 1), (0, 0), (0, 0)), mode=mode_rows)
    return np.pad(x, ((0, 0), (1, 1), (0, 0)), mode=mode_cols)


def _unpad(dp, mode_rows: str, mode_cols: str):
    d = dp.copy()
    # fold columns first (they were padded last)
    if mode_cols == "edge":
        d[:, 1] += d[:, 0]
        d[:, -2] += d[:, -1]
    elif mode_cols == "wrap":
        d[:, -2] += d[:, 0]
        d[:, 1] += d[:, -1]
    d = d[:, 1:-1]
    if mode_rows == "edge":
        d[1] += d[0]
        d[-2] += d[-1]
    elif mode_rows == "wrap":
        d[-2] += d[0]
        d[1] += d[-1]
    return d[1:-1]


def conv3x3_forward(x, w, b, stride: int, mode_rows: str = "constant", mode_cols: str = "constant"):
    """3x3 convolution of an (H, W, Cin) map with pad 1; w is (Cin, 3, 3, Cout)."""
    xp = _pad(x, mode_rows, mode_cols)
    win = sliding_window_view(xp, (3, 3), axis=(0, 1))[::stride, ::stride]
    ho, wo = win.shape[:2]
    cols = win.reshape(ho * wo, -1)
    out = (cols @ w.reshape(-1, w.shape[-1]) + b).reshape(ho, wo, -1)
    return out, (x.shape, cols, stride, mode_rows, mode_cols)


def conv3x3_backward(w, cache, dout):
    xshape, cols, stride, mode_rows, mode_cols = cache
    ho, wo, cout = dout.shape
    dflat = dout.reshape(-1, cout)
    dw = (cols.T @ dflat).reshape(w.shape)
    db = dflat.sum(axis=0)
    dcols = (dflat @ w.reshape(-1, cout).T).reshape(ho, wo, xshape[2], 3, 3)
    dp = np.zeros((xshape[0] + 2, xshape[1] + 2, xshape[2]), dtype=dout.dtype)
    for ky in range(3):
        for kx in range(3):
            dp[ky : ky + stride * (ho - 1) + 1 : stride, kx : kx + stride * (wo - 1) + 1 : stride] += dcols[
                ..., ky, kx
            ]
    return dw, db, _unpad(dp, mode_rows, mode_cols)


# --- bilinear gathers as sparse matrices ------------------------------------


def bilinear_matrix(col, row, inside, hw, dtype=np.float64) -> sp.csr_matrix:
    """Sparse (P, H*W) interpolation matrix with clamp-to-edge; rows of
    out-of-domain points are empty."""
    h, w = hw
    col = np.clip(np.asarray(col, dtype=np.float64), 0, w - 1)
    row = np.clip(np.asarray(row, dtype=np.float64), 0, h - 1)
    c0 = np.minimum(np.floor(col).astype(np.int64), max(w - 2, 0))
    r0 = np.minimum(np.floor(row).astype(np.int64), max(h - 2, 0))
    fc = col - c0
    fr = row - r0
    c1 = np.minimum(c0 + 1, w - 1)
    r1 = np.minimum(r0 + 1, h - 1)
    n = col.shape[0]
    m = inside.astype(np.float64)
    rows = np.repeat(np.arange(n), 4)
    idx = np.stack([r0 * w + c0, r0 * w + c1, r1 * w + c0, r1 * w + c1], axis=1).reshape(-1)
    wts = np.stack(
        [(1 - fr) * (1 - fc) * m, (1 - fr) * fc * m, fr * (1 - fc) * m, fr * fc * m], axis=1
    ).reshape(-1)
    return sp.csr_matrix((wts.astype(dtype), (rows, idx)), shape=(n, h * w))


@lru_cache(maxsize=16)
def _remap_matrix(K: Intrinsics, cfg: EncoderConfig, planar_hw: tuple, dtype_name: str):
    hs, ws = cfg.grid_hw
    fov = enlarged_fov(K, cfg.fov_extra_deg)
    rr, cc = np.meshgrid(np.arange(hs, dtype=np.float64), np.arange(ws, dtype=np.float64), indexing="ij")
    theta, phi = grid_to_spherical(cc.ravel(), rr.ravel(), fov, cfg.grid_hw)
    ray = spherical_to_direction(theta, phi)
    px = K.fx * ray[:, 0] + K.cx
    py = K.fy * ray[:, 1] + K.cy
    in_image = (px >= 0) & (px <= K.width - 1) & (py >= 0) & (py <= K.height - 1)
    s = cfg.stride
    mat = bilinear_matrix(px / s, py / s, in_image, planar_hw, dtype=np.dtype(dtype_name))
    return mat, fov, in_image.reshape(hs, ws)


def input_fov_mask(K: Intrinsics, cfg: EncoderConfig, planar_hw) -> np.ndarray:
    return _remap_matrix(K, cfg, tuple(planar_hw), "float64")[2]


def encode(params: dict, cfg: EncoderConfig, image: np.ndarray, K: Intrinsics):
    """Feature grid for one (H, W, 3) image; returns (FeatureGrid, cache)."""
    image = np.asarray(image)
    if image.shape != (K.height, K.width, 3):
        raise ValueError(f"image shape {image.shape} does not match camera {K.height}x{K.width}")
    dtype = params["enc.p0.w"].dtype
    x = image.astype(dtype, copy=False)
    caches = []
    for i in range(len(cfg.channels)):
        x, c = conv3x3_forward(x, params[f"enc.p{i}.w"], params[f"enc.p{i}.b"], 2)
        x = np.maximum(x, 0.0)
        caches.append((c, x))
    planar_hw = x.shape[:2]
    remap, fov, _ = _remap_matrix(K, cfg, tuple(planar_hw), dtype.name)
    hs, ws = cfg.grid_hw
    sph = (remap @ x.reshape(-1, x.shape[2])).reshape(hs, ws, -1)
    cols = "wrap" if cfg.wrap_theta else "edge"
    h1, c1 = conv3x3_forward(sph, params["enc.s0.w"], params["enc.s0.b"], 1, "edge", cols)
    h1 = np.maximum(h1, 0.0)
    out, c2 = conv3x3_forward(h1, params["enc.s1.w"], params["enc.s1.b"], 1, "edge", cols)
    cache = (caches, planar_hw, remap, c1, h1, c2)
    return FeatureGrid(out, fov), cache


def encode_backward(params: dict, cfg: EncoderConfig, cache, dgrid: np.ndarray) -> dict:
    caches, planar_hw, remap, c1, h1, c2 = cache
    grads = {}
    grads["enc.s1.w"], grads["enc.s1.b"], dh1 = conv3x3_backward(params["enc.s1.w"], c2, dgrid)
    dh1 = dh1 * (h1 > 0)
    grads["enc.s0.w"], grads["enc.s0.b"], dsph = conv3x3_backward(params["enc.s0.w"], c1, dh1)
    dx = (remap.T @ dsph.reshape(-1, dsph.shape[2])).reshape(planar_hw + (-1,))
    for i in reversed(range(len(cfg.channels))):
        c, out = caches[i]
        dx = dx * (out > 0)
        grads[f"enc.p{i}.w"], grads[f"enc.p{i}.b"], dx = conv3x3_backward(params[f"enc.p{i}.w"], c, dx)
    return grads


# --- point queries ----------------------------------------------------------


def sample_features(grid: FeatureGrid, points: np.ndarray):
    """Bilinear features at camera-frame points (P, 3).

    Returns (features (P, C), inside flags, interpolation matrix). Points whose
    direction falls outside the grid's fov get zeros and ``inside = False``.
    """
    pts = np.asarray(points).reshape(-1, 3)
    theta, phi = direction_to_spherical(pts)
    col, row, inside = spherical_to_grid(theta, phi, grid.fov, grid.hw)
    mat = bilinear_matrix(col, row, inside, grid.hw, dtype=grid.data.dtype)
    feats = mat @ grid.data.reshape(-1, grid.channels)
    return feats, inside, mat


def sample_features_backward(grid: FeatureGrid, mat: sp.csr_matrix, dfeat: np.ndarray) -> np.ndarray:
    return np.asarray(mat.T @ dfeat.reshape(-1, grid.channels)).reshape(grid.data.shape)
