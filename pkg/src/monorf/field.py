"""Conditioned radiance field f and Gaussian-mixture predictor g.

Both are small ReLU MLPs with hand-written reverse passes. Every forward
returns a cache that the matching ``*_backward`` consumes; arrays follow the
dtype of the parameters they are given (float32 for training, float64 for
gradient checks).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

STD_FLOOR = 0.05


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softplus(x):
    return np.logaddexp(0.0, x).astype(np.asarray(x).dtype, copy=False)


def positional_encoding(x, n_freqs: int, scale: float = 1.0) -> np.ndarray:
    """``[x/scale, sin(2^l pi x/scale), cos(2^l pi x/scale)]`` for l < n_freqs.

    Per frequency the 3 sines precede the 3 cosines; output width 3 + 6 L.
    """
    x = np.asarray(x)
    if n_freqs < 0:
        raise ValueError("frequency count must be non-negative")
    xs = x / scale if scale != 1.0 else x
    parts = [xs]
    for level in range(n_freqs):
        arg = (2.0**level * np.pi) * xs
        parts.append(np.sin(arg))
        parts.append(np.cos(arg))
    return np.concatenate(parts, axis=-1)


def encoding_width(n_freqs: int) -> int:
    return 3 + 6 * n_freqs


# --- dense stacks ---------------------------------------------------------


def init_mlp(rng: np.random.Generator, sizes, prefix: str, zero_last: bool = True) -> dict:
    """Kaiming-uniform fan-in init; the last layer is zeroed when ``zero_last``."""
    params = {}
    n = len(sizes) - 1
    for i in range(n):
        fan_in, fan_out = sizes[i], sizes[i + 1]
        if zero_last and i == n - 1:
            w = np.zeros((fan_in, fan_out))
        else:
            bound = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        params[f"{prefix}.{i}.w"] = w
        params[f"{prefix}.{i}.b"] = np.zeros(fan_out)
    return params


def mlp_forward(params: dict, prefix: str, n_layers: int, x: np.ndarray):
    """ReLU between layers, linear output."""
    acts = [x]
    h = x
    for i in range(n_layers):
        h = h @ params[f"{prefix}.{i}.w"] + params[f"{prefix}.{i}.b"]
        if i < n_layers - 1:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return h, acts


def mlp_backward(params: dict, prefix: str, n_layers: int, acts: list, dout: np.ndarray):
    grads = {}
    g = dout
    for i in reversed(range(n_layers)):
        if i < n_layers - 1:
            g = g * (acts[i + 1] > 0)
        inp = acts[i]
        flat_in = inp.reshape(-1, inp.shape[-1])
        flat_g = g.reshape(-1, g.shape[-1])
        grads[f"{prefix}.{i}.w"] = flat_in.T @ flat_g
        grads[f"{prefix}.{i}.b"] = flat_g.sum(axis=0)
        g = g @ params[f"{prefix}.{i}.w"].T
    return grads, g


# --- radiance field -------------------------------------------------------


@dataclass(frozen=True)
class FieldConfig:
    feat_channels: int = 32
    pos_freqs: int = 10
    dir_freqs: int = 4
    hidden: int = 64
    depth: int = 4
    gauss_hidden: int = 64
    gauss_depth: int = 2
    n_gaussians: int = 4

    @property
    def field_in(self) -> int:
        return encoding_width(self.pos_freqs) + encoding_width(self.dir_freqs) + self.feat_channels

    @property
    def field_layers(self) -> int:
        return self.depth + 1

    @property
    def gauss_in(self) -> int:
        return self.n_gaussians * (1 + self.feat_channels)

    @property
    def gauss_layers(self) -> int:
        return self.gauss_depth + 1


def init_field_params(rng: np.random.Generator, cfg: FieldConfig) -> dict:
    sizes = [cfg.field_in] + [cfg.hidden] * cfg.depth + [4]
    return init_mlp(rng, sizes, "field")


def init_gauss_params(rng: np.random.Generator, cfg: FieldConfig) -> dict:
    sizes = [cfg.gauss_in] + [cfg.gauss_hidden] * cfg.gauss_depth + [2 * cfg.n_gaussians]
    params = init_mlp(rng, sizes, "gauss")
    # Zero weights alone would start every Gaussian at the same mean, and
    # identical Gaussians receive identical updates forever. Spreading the
    # mean biases over the range quantiles breaks that symmetry.
    q = (np.arange(cfg.n_gaussians) + 0.5) / cfg.n_gaussians
    params[f"gauss.{len(sizes) - 2}.b"][: cfg.n_gaussians] = np.log(q / (1.0 - q))
    return params


def field_eval(params: dict, cfg: FieldConfig, gx, d_enc, feat):
    """Color in [0,1]^3 (sigmoid head) and density >= 0 (softplus head).

    ``gx`` is the encoded position, ``d_enc`` the encoded direction; leading
    dimensions are broadcast-free and must agree.
    """
    x = np.concatenate([gx, d_enc, feat], axis=-1)
    if x.shape[-1] != cfg.field_in:
        raise ValueError(f"field input width {x.shape[-1]} != {cfg.field_in}")
    head, acts = mlp_forward(params, "field", cfg.field_layers, x)
    sigma = softplus(head[..., 0])
    rgb = sigmoid(head[..., 1:4])
    cache = (acts, head, rgb, gx.shape[-1], d_enc.shape[-1])
    return rgb, sigma, cache


def field_backward(params: dict, cfg: FieldConfig, cache, d_rgb, d_sigma):
    """Returns (param grads, d gx, d feat)."""
    acts, head, rgb, n_gx, n_d = cache
    dhead = np.empty_like(head)
    dhead[..., 0] = d_sigma * sigmoid(head[..., 0])
    dhead[..., 1:4] = d_rgb * rgb * (1.0 - rgb)
    grads, dx = mlp_backward(params, "field", cfg.field_layers, acts, dhead)
    return grads, dx[..., :n_gx], dx[..., n_gx + n_d :]


# --- mixture predictor ----------------------------------------------------


def mixture_input(distances, feats, t_near: float, t_far: float):
    """Flatten per-point (normalized distance, feature) pairs in sorted order."""
    u = (distances - t_near) / (t_far - t_near)
    per_point = np.concatenate([u[..., None], feats], axis=-1)
    return per_point.reshape(per_point.shape[:-2] + (-1,))


def predict_mixture(params: dict, cfg: FieldConfig, distances, feats, t_near: float,
                    t_far: float, std_floor: float = STD_FLOOR):
    """Means in [t_near, t_far] via a scaled sigmoid; stds >= std_floor via softplus."""
    distances = np.asarray(distances)
    if distances.shape[-1] != cfg.n_gaussians or feats.shape[-2] != cfg.n_gaussians:
        raise ValueError("expected k points per ray")
    x = mixture_input(distances, feats, t_near, t_far)
    raw, acts = mlp_forward(params, "gauss", cfg.gauss_layers, x)
    raw_mu, raw_s = raw[..., : cfg.n_gaussians], raw[..., cfg.n_gaussians :]
    sig = sigmoid(raw_mu)
    means = t_near + sig * (t_far - t_near)
    stds = std_floor + softplus(raw_s)
    cache = (acts, sig, raw_s, t_far - t_near, feats.shape[-1])
    return means, stds, cache


def predict_mixture_backward(params: dict, cfg: FieldConfig, cache, d_means, d_stds):
    """Returns (param grads, d feats) with d feats shaped (..., k, C)."""
    acts, sig, raw_s, span, n_c = cache
    draw = np.concatenate([d_means * sig * (1.0 - sig) * span, d_stds * sigmoid(raw_s)], axis=-1)
    grads, dx = mlp_backward(params, "gauss", cfg.gauss_layers, acts, draw)
    dx = dx.reshape(dx.shape[:-1] + (cfg.n_gaussians, 1 + n_c))
    return grads, dx[..., 1:]
