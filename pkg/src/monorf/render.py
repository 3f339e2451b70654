"""Volume-rendering quadrature along rays.

All functions operate on the trailing sample axis, so a single ray is an
``(N,)`` array and a batch is ``(R, N)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(eq=False)
class RayRender:
    color: np.ndarray  # (..., 3)
    depth: np.ndarray  # (...)
    weights: np.ndarray  # (..., N)
    transmittance: np.ndarray  # (..., N + 1); last entry is the residual
    alphas: np.ndarray  # (..., N)
    weight_sum: np.ndarray  # (...)


def deltas_from_distances(distances, t_near: float) -> np.ndarray:
    """Interval to the previous sample; the first interval starts at ``t_near``."""
    d = np.asarray(distances)
    prev = np.concatenate([np.full(d.shape[:-1] + (1,), t_near, dtype=d.dtype), d[..., :-1]], axis=-1)
    return d - prev


def alpha_values(sigmas, deltas) -> np.ndarray:
    """Per-interval opacity ``1 - exp(-sigma delta)``."""
    return -np.expm1(-np.asarray(sigmas) * np.asarray(deltas))


def composite(distances, sigmas, colors, t_near: float, normalize_depth: bool = False) -> RayRender:
    """Weights ``w_i = T_i alpha_i``, color ``sum w c`` and depth ``sum w d``.

    Depth uses the raw weights unless ``normalize_depth``, in which case it is
    divided by the weight sum (left at 0 for empty rays).
    """
    distances = np.asarray(distances)
    sigmas = np.asarray(sigmas)
    deltas = deltas_from_distances(distances, t_near)
    if np.any(deltas <= 0):
        raise ValueError("sample distances must be strictly increasing and beyond t_near")
    tau = sigmas * deltas
    acc = np.cumsum(tau, axis=-1)
    zero = np.zeros(acc.shape[:-1] + (1,), dtype=acc.dtype)
    trans = np.exp(-np.concatenate([zero, acc], axis=-1))
    alphas = -np.expm1(-tau)
    weights = trans[..., :-1] * alphas
    color = np.einsum("...n,...nc->...c", weights, colors)
    wsum = weights.sum(axis=-1)
    depth = (weights * distances).sum(axis=-1)
    if normalize_depth:
        depth = np.where(wsum > 1e-10, depth / np.maximum(wsum, 1e-10), 0.0)
    return RayRender(color, depth, weights, trans, alphas, wsum)


def composite_backward(distances, sigmas, colors, t_near: float, out: RayRender,
                       d_color, d_depth, d_weight_sum=None):
    """Gradients of a scalar loss w.r.t. sigmas and colors (raw-weight depth)."""
    distances = np.asarray(distances)
    deltas = deltas_from_distances(distances, t_near)
    g_w = np.einsum("...c,...nc->...n", d_color, colors) + np.asarray(d_depth)[..., None] * distances
    if d_weight_sum is not None:
        g_w = g_w + np.asarray(d_weight_sum)[..., None]
    d_colors = out.weights[..., None] * d_color[..., None, :]
    gw_w = g_w * out.weights
    # sum over i > k of g_w_i w_i
    later = np.cumsum(gw_w[..., ::-1], axis=-1)[..., ::-1] - gw_w
    d_tau = g_w * out.transmittance[..., :-1] * (1.0 - out.alphas) - later
    return d_tau * deltas, d_colors
