"""End-to-end batch forward/backward and view rendering.

Everything downstream of the rays lives in the input camera's frame: sample
points are expressed there for positional encoding and feature lookup, and
ray directions are rotated into it.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import encoder as enc
from .encoder import EncoderConfig, FeatureGrid, encode, encode_backward, sample_features, sample_features_backward
from .field import (
    STD_FLOOR,
    FieldConfig,
    field_backward,
    field_eval,
    init_field_params,
    init_gauss_params,
    positional_encoding,
    predict_mixture,
    predict_mixture_backward,
)
from .geometry import Intrinsics, SE3Pose, pixel_grid, pixel_rays
from .losses import reproj_loss, rgb_loss
from .prsamp import N_UNIFORM, draw_noise, prsom_update, sample_points, sampling_losses
from .render import composite, composite_backward


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    field: FieldConfig = field(default_factory=FieldConfig)
    t_near: float = 0.2
    t_far: float = 25.0
    samples_per_gaussian: int = 8
    n_uniform: int = N_UNIFORM
    std_floor: float = STD_FLOOR
    min_weight: float = 0.5
    normalize_depth: bool = False
    chunk_rays: int = 64
    surface_grad: str = "mixture"

    @property
    def n_gaussians(self) -> int:
        return self.field.n_gaussians

    @property
    def n_samples(self) -> int:
        return self.n_gaussians * self.samples_per_gaussian + self.n_uniform


def init_params(cfg: ModelConfig, seed: int, dtype=np.float32) -> dict:
    rng = np.random.default_rng([seed, 0x5EED])
    params = {}
    params.update(enc.init_encoder_params(rng, cfg.encoder))
    params.update(init_field_params(rng, cfg.field))
    params.update(init_gauss_params(rng, cfg.field))
    return {name: params[name].astype(dtype) for name in sorted(params)}


def cast_params(params: dict, dtype) -> dict:
    return {k: v.astype(dtype) for k, v in params.items()}


# --- per-chunk ray pipeline -------------------------------------------------


@dataclass(eq=False)
class ChunkForward:
    color: np.ndarray
    depth: np.ndarray
    weight_sum: np.ndarray
    means: np.ndarray
    stds: np.ndarray
    distances: np.ndarray
    sigmas: np.ndarray
    colors: np.ndarray
    target_means: np.ndarray
    target_stds: np.ndarray
    render: object = None
    caches: tuple = None


def _anchor_distances(cfg: ModelConfig, n_rays: int, dtype):
    u = np.linspace(cfg.t_near, cfg.t_far, cfg.n_gaussians).astype(dtype)
    return np.broadcast_to(u, (n_rays, cfg.n_gaussians))


def ray_forward(params: dict, cfg: ModelConfig, grid: FeatureGrid, origins, dirs, noise=None,
                frozen=None, density_fn=None, keep_cache: bool = True) -> ChunkForward:
    """Mixture prediction, sampling, field queries and compositing for rays
    given in the input-camera frame.

    ``frozen`` carries sample distances and PrSOM targets from an earlier call;
    ``density_fn(points) -> sigma`` replaces the field's density when given.
    """
    dtype = grid.data.dtype
    o = origins.astype(dtype, copy=False)
    d = dirs.astype(dtype, copy=False)
    r = o.shape[0]
    fc = cfg.field
    anchors = _anchor_distances(cfg, r, dtype)
    x_anchor = o[:, None, :] + anchors[..., None] * d[:, None, :]
    feat_a, _, mat_a = sample_features(grid, x_anchor)
    means, stds, gcache = predict_mixture(
        params, fc, anchors, feat_a.reshape(r, cfg.n_gaussians, -1), cfg.t_near, cfg.t_far, cfg.std_floor
    )
    if frozen is not None:
        dist = frozen["distances"]
    else:
        dist = sample_points(means, stds, cfg.samples_per_gaussian, cfg.t_near, cfg.t_far, noise=noise, n_uniform=cfg.n_uniform).distances
    # distances stay float64: the 1e-6 m tie separation does not survive float32
    dist = np.asarray(dist, dtype=np.float64)
    n = dist.shape[1]
    pts = o[:, None, :] + dist.astype(dtype)[..., None] * d[:, None, :]
    gx = positional_encoding(pts, fc.pos_freqs, scale=cfg.t_far)
    de = np.broadcast_to(positional_encoding(d, fc.dir_freqs)[:, None, :], (r, n, 3 + 6 * fc.dir_freqs))
    feats, _, mat = sample_features(grid, pts)
    colors, sigmas, fcache = field_eval(params, fc, gx, de, feats.reshape(r, n, -1))
    if density_fn is not None:
        sigmas = np.asarray(density_fn(pts), dtype=dtype)
    out = composite(dist, sigmas, colors, cfg.t_near, normalize_depth=cfg.normalize_depth)
    if frozen is not None:
        tm, ts = frozen["target_means"], frozen["target_stds"]
    else:
        tm, ts, _ = prsom_update(means, stds, dist, out.alphas, cfg.std_floor)
    caches = (mat_a, gcache, mat, fcache) if keep_cache else None
    return ChunkForward(out.color, out.depth, out.weight_sum, means, stds, dist, sigmas, colors,
                        tm, ts, out if keep_cache else None, caches)


def ray_backward(params: dict, cfg: ModelConfig, grid: FeatureGrid, fw: ChunkForward,
                 d_color, d_depth, d_means, d_stds):
    """Parameter gradients (field and mixture predictor) and d grid for one chunk."""
    fc = cfg.field
    mat_a, gcache, mat, fcache = fw.caches
    r, n = fw.distances.shape
    dtype = grid.data.dtype
    d_sigma, d_colors = composite_backward(fw.distances, fw.sigmas, fw.colors, cfg.t_near, fw.render, d_color, d_depth)
    grads, _, dfeat = field_backward(params, fc, fcache, d_colors.astype(dtype), d_sigma.astype(dtype))
    dgrid = sample_features_backward(grid, mat, dfeat.reshape(r * n, -1))
    ggrads, dfeat_a = predict_mixture_backward(params, fc, gcache, d_means.astype(dtype), d_stds.astype(dtype))
    dgrid += sample_features_backward(grid, mat_a, dfeat_a.reshape(r * cfg.n_gaussians, -1))
    grads.update(ggrads)
    return grads, dgrid


# --- batches ----------------------------------------------------------------


@dataclass(eq=False)
class Batch:
    """One training batch: rays from a source frame, its preceding target frame,
    and the conditioning input frame. Poses are world-frame."""

    input_image: np.ndarray
    input_pose: SE3Pose
    K: Intrinsics
    src_image: np.ndarray
    src_pose: SE3Pose
    tgt_image: np.ndarray
    tgt_pose: SE3Pose
    pixels: np.ndarray  # (l, 2)

    @property
    def gt_colors(self) -> np.ndarray:
        px = self.pixels.astype(np.int64)
        return self.src_image[px[:, 1], px[:, 0]]


@dataclass(eq=False)
class LossReport:
    l_rgb: float
    l_reproj: float
    l_gauss: float
    l_surface: float
    reproj_empty: bool

    @property
    def l_samp(self) -> float:
        return self.l_gauss + self.l_surface

    @property
    def l_total(self) -> float:
        return self.l_rgb + self.l_reproj + self.l_gauss + self.l_surface


@dataclass(frozen=True)
class LossSwitches:
    rgb: bool = True
    reproj: bool = True
    samp: bool = True


def _chunks(n: int, size: int):
    return [slice(i, min(i + size, n)) for i in range(0, n, size)]


def _map(fn, items, threads: int):
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def loss_and_grads(params: dict, cfg: ModelConfig, batch: Batch, noise=None, frozen=None,
                   switches: LossSwitches = LossSwitches(), threads: int = 1, need_grads: bool = True):
    """Total loss, per-parameter gradients and the frozen (stop-gradient) state.

    Rays are split into fixed-size chunks; chunk results are reduced in chunk
    order, so the output does not depend on ``threads``.
    """
    dtype = params["enc.p0.w"].dtype
    grid, enc_cache = encode(params, cfg.encoder, batch.input_image, batch.K)
    o_w, d_w = pixel_rays(batch.K, batch.src_pose, batch.pixels)
    to_in = batch.input_pose.inverse()
    o = to_in.apply(o_w)
    d = to_in.apply_rotation(d_w)
    n_rays = o.shape[0]
    slices = _chunks(n_rays, cfg.chunk_rays)

    def fwd(sl):
        fz = None
        if frozen is not None:
            fz = {k: frozen[k][sl] for k in ("distances", "target_means", "target_stds")}
        nz = None if noise is None else (noise[0][sl], noise[1][sl])
        return ray_forward(params, cfg, grid, o[sl], d[sl], noise=nz, frozen=fz, keep_cache=need_grads)

    outs = _map(fwd, slices, threads)
    color = np.concatenate([f.color for f in outs])
    depth = np.concatenate([f.depth for f in outs])
    wsum = np.concatenate([f.weight_sum for f in outs])
    means = np.concatenate([f.means for f in outs])
    stds = np.concatenate([f.stds for f in outs])
    tmeans = np.concatenate([f.target_means for f in outs])
    tstds = np.concatenate([f.target_stds for f in outs])

    l_rgb, d_color = rgb_loss(color, batch.gt_colors.astype(dtype))
    rp = reproj_loss(
        batch.pixels, o_w, d_w, depth.astype(np.float64), wsum, batch.src_image, batch.tgt_image,
        batch.tgt_pose, batch.K, min_weight=cfg.min_weight,
        mask=None if frozen is None else frozen["reproj_mask"],
    )
    sl_ = sampling_losses(means, stds, tmeans, tstds, depth, cfg.surface_grad)
    report = LossReport(
        l_rgb if switches.rgb else 0.0,
        rp.loss if switches.reproj else 0.0,
        sl_.l_gauss if switches.samp else 0.0,
        sl_.l_surface if switches.samp else 0.0,
        rp.empty,
    )
    new_frozen = {
        "distances": np.concatenate([f.distances for f in outs]),
        "target_means": tmeans,
        "target_stds": tstds,
        "reproj_mask": rp.mask,
    }
    if not need_grads:
        return report, None, new_frozen

    d_depth = np.zeros_like(depth)
    d_means = np.zeros_like(means)
    d_stds = np.zeros_like(stds)
    if not switches.rgb:
        d_color = np.zeros_like(d_color)
    if switches.reproj:
        d_depth += rp.d_depth.astype(dtype)
    if switches.samp:
        d_depth += sl_.d_depth.astype(dtype)
        d_means += sl_.d_means.astype(dtype)
        d_stds += sl_.d_stds.astype(dtype)

    def bwd(item):
        sl, fw = item
        return ray_backward(params, cfg, grid, fw, d_color[sl], d_depth[sl], d_means[sl], d_stds[sl])

    parts = _map(bwd, list(zip(slices, outs)), threads)
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    dgrid = np.zeros_like(grid.data)
    for g, dg in parts:
        for k, v in g.items():
            grads[k] += v
        dgrid += dg
    grads.update(encode_backward(params, cfg.encoder, enc_cache, dgrid))
    return report, grads, new_frozen


# --- inference --------------------------------------------------------------


@dataclass(eq=False)
class ViewRender:
    depth: np.ndarray
    rgb: np.ndarray
    weight_sum: np.ndarray

    @property
    def valid(self) -> np.ndarray:
        return self.weight_sum >= 0.5


def render_rays_world(params: dict, cfg: ModelConfig, grid: FeatureGrid, input_pose: SE3Pose,
                      origins_w, dirs_w, seed: int, stream: int = 0, threads: int = 1,
                      chunk: int = 512, density_fn=None):
    """Render world-frame rays; returns color (R, 3), depth (R,), weight sum (R,)."""
    to_in = input_pose.inverse()
    o = to_in.apply(origins_w)
    d = to_in.apply_rotation(dirs_w)
    n = o.shape[0]
    rng = np.random.default_rng([seed, 0xEE, stream])
    noise = draw_noise(rng, n, cfg.n_gaussians, cfg.samples_per_gaussian, cfg.n_uniform)
    slices = _chunks(n, chunk)

    def run(sl):
        f = ray_forward(params, cfg, grid, o[sl], d[sl], noise=(noise[0][sl], noise[1][sl]),
                        density_fn=density_fn, keep_cache=False)
        return f.color, f.depth, f.weight_sum

    outs = _map(run, slices, threads)
    return (np.concatenate([c for c, _, _ in outs]), np.concatenate([x for _, x, _ in outs]),
            np.concatenate([w for _, _, w in outs]))


def render_view(params: dict, cfg: ModelConfig, input_image, K: Intrinsics, input_pose: SE3Pose,
                view_pose: SE3Pose, seed: int = 0, stream: int = 0, threads: int = 1,
                grid: FeatureGrid | None = None, view_K: Intrinsics | None = None) -> ViewRender:
    """Dense novel depth/color at ``view_pose`` conditioned on ``input_image``."""
    if grid is None:
        grid, _ = encode(params, cfg.encoder, input_image, K)
    vk = view_K or K
    o, d = pixel_rays(vk, view_pose, pixel_grid(vk).reshape(-1, 2))
    color, depth, wsum = render_rays_world(params, cfg, grid, input_pose, o, d, seed, stream, threads)
    h, w = vk.height, vk.width
    return ViewRender(depth.reshape(h, w).astype(np.float64), color.reshape(h, w, 3).astype(np.float64),
                      wsum.reshape(h, w).astype(np.float64))
