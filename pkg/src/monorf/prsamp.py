"""Probabilistic ray sampling: mixture-guided sample placement, the
self-organizing mixture update, and the sampling losses.

Arrays are batched over rays: means/stds are (R, k), samples (R, N).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .field import STD_FLOOR

N_UNIFORM = 32
UNIFORM_TAG = -1
_TIE_EPS = 1e-6
SURFACE_GRAD_MODES = ("mixture", "depth", "none")


@dataclass(eq=False)
class SampleSet:
    distances: np.ndarray  # (R, N) sorted
    tags: np.ndarray  # (R, N) gaussian index or UNIFORM_TAG


def draw_noise(rng: np.random.Generator, n_rays: int, n_gaussians: int, samples_per_gaussian: int,
               n_uniform: int = N_UNIFORM):
    """Standard-normal and unit-uniform draws consumed by ``sample_points``."""
    return rng.standard_normal((n_rays, n_gaussians, samples_per_gaussian)), rng.random((n_rays, n_uniform))


def sample_points(means, stds, samples_per_gaussian: int, t_near: float, t_far: float, rng=None, noise=None,
                  n_uniform: int = N_UNIFORM) -> SampleSet:
    """``samples_per_gaussian`` draws per Gaussian (clamped to the bounds) plus ``n_uniform``
    stratified uniform draws, merged and sorted.

    Pass either an rng or pre-drawn ``noise`` from :func:`draw_noise`.
    """
    # float64 throughout: the tie separation is below float32 resolution at range
    means = np.atleast_2d(np.asarray(means, dtype=np.float64))
    stds = np.atleast_2d(np.asarray(stds, dtype=np.float64))
    m = samples_per_gaussian
    if m < 1:
        raise ValueError("samples_per_gaussian must be >= 1")
    r, k = means.shape
    if noise is None:
        noise = draw_noise(rng, r, k, m, n_uniform)
    eps, u = noise
    g = np.clip(means[..., None] + stds[..., None] * eps, t_near, t_far).reshape(r, k * m)
    edges = np.linspace(t_near, t_far, n_uniform + 1)
    uni = edges[:-1] + (edges[1:] - edges[:-1]) * u
    dist = np.concatenate([g, uni], axis=1)
    tags = np.concatenate(
        [np.broadcast_to(np.repeat(np.arange(k), m), (r, k * m)), np.full((r, n_uniform), UNIFORM_TAG)], axis=1
    )
    order = np.argsort(dist, axis=1, kind="stable")
    dist = np.take_along_axis(dist, order, axis=1)
    tags = np.take_along_axis(tags, order, axis=1)
    dist = _separate(dist, t_near, t_far)
    return SampleSet(dist, tags)


def _separate(dist, t_near: float, t_far: float):
    """Make sorted rows strictly increasing and strictly above t_near by nudging
    ties up by 1e-6 m; rows crowded at t_far are shifted back inside the bound."""
    n = dist.shape[1]
    floor = t_near + _TIE_EPS * (1 + np.arange(n))
    ceil = t_far - _TIE_EPS * np.arange(n)[::-1]
    out = dist.copy()
    out[:, 0] = np.maximum(out[:, 0], floor[0])
    for i in range(1, n):
        out[:, i] = np.maximum(out[:, i], out[:, i - 1] + _TIE_EPS)
    return np.minimum(out, ceil)


def responsibilities(means, stds, distances):
    """p(j | G_i) normalized over Gaussians; shape (R, k, N).

    Computed from log-likelihoods so far-away points still get assigned.
    """
    s = stds[:, :, None]
    z = (distances[:, None, :] - means[:, :, None]) / s
    loglik = -0.5 * z * z - np.log(s)
    loglik -= loglik.max(axis=1, keepdims=True)
    lik = np.exp(loglik)
    return lik / lik.sum(axis=1, keepdims=True)


def prsom_update(means, stds, distances, alphas, std_floor: float = STD_FLOOR, min_mass: float = 1e-8):
    """Responsibility- and occupancy-weighted mean/std per Gaussian.

    Gaussians with total weight below ``min_mass`` keep their parameters.
    The result is re-sorted by mean so the 1D ordering of the mixture holds.
    Returns (means', stds', responsibilities).
    """
    means = np.atleast_2d(np.asarray(means, dtype=np.float64))
    stds = np.atleast_2d(np.asarray(stds, dtype=np.float64))
    distances = np.atleast_2d(np.asarray(distances, dtype=np.float64))
    alphas = np.atleast_2d(np.asarray(alphas, dtype=np.float64))
    resp = responsibilities(means, stds, distances)
    w = resp * alphas[:, None, :]
    mass = w.sum(axis=2)
    ok = mass >= min_mass
    safe = np.where(ok, mass, 1.0)
    mu = (w * distances[:, None, :]).sum(axis=2) / safe
    var = (w * (distances[:, None, :] - mu[..., None]) ** 2).sum(axis=2) / safe
    sd = np.maximum(np.sqrt(var), std_floor)
    mu = np.where(ok, mu, means)
    sd = np.where(ok, sd, stds)
    order = np.argsort(mu, axis=1, kind="stable")
    return np.take_along_axis(mu, order, axis=1), np.take_along_axis(sd, order, axis=1), resp


def kl_1d_gauss(mu, s, mu2, s2):
    """KL(N(mu, s^2) || N(mu2, s2^2))."""
    return np.log(s2 / s) + (s * s + (mu - mu2) ** 2) / (2.0 * s2 * s2) - 0.5


def kl_1d_gauss_grad(mu, s, mu2, s2):
    """Partial derivatives of the KL w.r.t. (mu, s) of the first argument."""
    return (mu - mu2) / (s2 * s2), -1.0 / s + s / (s2 * s2)


@dataclass(eq=False)
class SamplingLosses:
    l_gauss: float
    l_surface: float
    d_means: np.ndarray
    d_stds: np.ndarray
    d_depth: np.ndarray
    closest: np.ndarray

    @property
    def l_samp(self) -> float:
        return self.l_gauss + self.l_surface


def sampling_losses(means, stds, target_means, target_stds, depth, surface_grad: str = "mixture") -> SamplingLosses:
    """Mean-over-rays KL to the (constant) updated mixture plus the distance
    from rendered depth to the closest updated mean. Ties go to the lowest index.

    ``surface_grad`` picks where the surface term's gradient goes:
    ``"depth"`` differentiates w.r.t. the rendered depth (updated means held
    constant), ``"mixture"`` pulls the live mean of the closest Gaussian toward
    the (constant) depth, ``"none"`` only reports the value.
    """
    if surface_grad not in SURFACE_GRAD_MODES:
        raise ValueError(f"surface_grad must be one of {SURFACE_GRAD_MODES}")
    means = np.atleast_2d(means)
    stds = np.atleast_2d(stds)
    target_means = np.atleast_2d(target_means)
    target_stds = np.atleast_2d(target_stds)
    depth = np.atleast_1d(depth)
    r, k = means.shape
    kl = kl_1d_gauss(means, stds, target_means, target_stds)
    l_gauss = float(kl.sum() / (k * r))
    dmu, ds = kl_1d_gauss_grad(means, stds, target_means, target_stds)
    dmu = dmu / (k * r)
    ds = ds / (k * r)
    gap = target_means - depth[:, None]
    closest = np.argmin(np.abs(gap), axis=1)
    g = np.take_along_axis(gap, closest[:, None], axis=1)[:, 0]
    l_surface = float(np.abs(g).sum() / r)
    d_depth = np.zeros_like(depth)
    if surface_grad == "depth":
        # d|mu' - D| / dD = -sign(mu' - D)
        d_depth = -np.sign(g) / r
    elif surface_grad == "mixture":
        live = np.take_along_axis(means, closest[:, None], axis=1)[:, 0]
        np.add.at(dmu, (np.arange(r), closest), np.sign(live - depth) / r)
    return SamplingLosses(l_gauss, l_surface, dmu, ds, d_depth, closest)
