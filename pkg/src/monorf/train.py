"""Adam optimisation of the full model over a posed sequence."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .model import Batch, LossSwitches, ModelConfig, init_params, loss_and_grads
from .prsamp import draw_noise

log = logging.getLogger(__name__)

LOG_FIELDS = ["epoch", "step", "l_rgb", "l_reproj", "l_gauss", "l_surface", "l_total", "lr"]


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    steps_per_epoch: int = 20
    rays_per_batch: int = 256
    lr: float = 5e-3
    gamma: float = 0.99
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    switches: LossSwitches = field(default_factory=LossSwitches)

    def __post_init__(self):
        if self.rays_per_batch < 1 or self.steps_per_epoch < 1 or self.epochs < 0:
            raise ValueError("epochs >= 0, steps_per_epoch >= 1 and rays_per_batch >= 1 required")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.gamma**epoch


@dataclass(eq=False)
class ModelState:
    params: dict
    adam_m: dict
    adam_v: dict
    step: int = 0
    epoch: int = 0

    @classmethod
    def fresh(cls, cfg: ModelConfig, seed: int) -> "ModelState":
        p = init_params(cfg, seed)
        return cls(p, {k: np.zeros_like(v) for k, v in p.items()}, {k: np.zeros_like(v) for k, v in p.items()})

    def copy(self) -> "ModelState":
        return ModelState(
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.adam_m.items()},
            {k: v.copy() for k, v in self.adam_v.items()},
            self.step,
            self.epoch,
        )

    def equals(self, other: "ModelState") -> bool:
        same = self.step == other.step and self.epoch == other.epoch
        for a, b in ((self.params, other.params), (self.adam_m, other.adam_m), (self.adam_v, other.adam_v)):
            same = same and a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)
        return same


def adam_update(state: ModelState, grads: dict, lr: float, tc: TrainConfig):
    state.step += 1
    t = state.step
    c1 = 1.0 - tc.beta1**t
    c2 = 1.0 - tc.beta2**t
    for name in sorted(state.params):
        g = grads[name]
        p = state.params[name]
        m = state.adam_m[name]
        v = state.adam_v[name]
        m *= np.float32(tc.beta1)
        m += np.float32(1.0 - tc.beta1) * g
        v *= np.float32(tc.beta2)
        v += np.float32(1.0 - tc.beta2) * (g * g)
        upd = (m / np.float32(c1)) / (np.sqrt(v / np.float32(c2)) + np.float32(tc.eps))
        if tc.weight_decay:
            upd = upd + np.float32(tc.weight_decay) * p
        p -= np.float32(lr) * upd


def make_batch(frames, K, tc: TrainConfig, cfg: ModelConfig, epoch: int, step: int):
    """Pick a source frame j in 2..n_frames, its preceding target, and random pixels."""
    rng = np.random.default_rng([tc.seed, epoch, step])
    j = int(rng.integers(1, len(frames)))
    n = tc.rays_per_batch
    px = np.stack([rng.integers(0, K.width, n), rng.integers(0, K.height, n)], axis=1).astype(np.float64)
    noise = draw_noise(rng, n, cfg.n_gaussians, cfg.samples_per_gaussian, cfg.n_uniform)
    batch = Batch(
        frames[0].rgb, frames[0].pose, K, frames[j].rgb, frames[j].pose, frames[j - 1].rgb, frames[j - 1].pose, px
    )
    return batch, noise, j


def train(dataset, cfg: ModelConfig, tc: TrainConfig, state: ModelState | None = None,
          checkpoint_fn=None, log_path=None, threads: int = 1, progress=None):
    """Run epochs ``state.epoch .. tc.epochs - 1``; returns (state, log rows).

    The batch for (epoch, step) is derived from the seed alone, so a run
    resumed from an epoch checkpoint matches an uninterrupted one.
    ``checkpoint_fn(state)`` is called after every epoch.
    """
    frames = dataset.train
    if len(frames) < 2:
        raise ValueError("training needs at least two frames")
    K = dataset.camera
    state = state.copy() if state is not None else ModelState.fresh(cfg, tc.seed)
    rows = []
    writer = None
    fh = None
    if log_path is not None:
        log_path = Path(log_path)
        append = log_path.exists() and state.epoch > 0
        fh = open(log_path, "a" if append else "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        if not append:
            writer.writeheader()
    try:
        with threadpool_limits(limits=1):
            while state.epoch < tc.epochs:
                epoch = state.epoch
                lr = tc.lr_at(epoch)
                for step in range(tc.steps_per_epoch):
                    batch, noise, j = make_batch(frames, K, tc, cfg, epoch, step)
                    rep, grads, _ = loss_and_grads(state.params, cfg, batch, noise=noise,
                                                   switches=tc.switches, threads=threads)
                    if not math.isfinite(rep.l_total) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                        raise TrainingError(f"non-finite loss at epoch {epoch} step {step} (source frame {j})")
                    adam_update(state, grads, lr, tc)
                    row = {
                        "epoch": epoch, "step": step, "l_rgb": rep.l_rgb, "l_reproj": rep.l_reproj,
                        "l_gauss": rep.l_gauss, "l_surface": rep.l_surface, "l_total": rep.l_total, "lr": lr,
                    }
                    rows.append(row)
                    if writer:
                        writer.writerow(row)
                state.epoch += 1
                if fh:
                    fh.flush()
                if checkpoint_fn is not None:
                    checkpoint_fn(state)
                if progress is not None:
                    progress(state, rows)
    finally:
        if fh:
            fh.close()
    return state, rows


def epoch_means(rows, key: str = "l_total") -> np.ndarray:
    by = {}
    for r in rows:
        by.setdefault(int(r["epoch"]), []).append(float(r[key]))
    return np.array([np.mean(by[e]) for e in sorted(by)])
