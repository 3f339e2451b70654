"""Run configuration: one flat TOML document of typed keys.

Precedence (lowest to highest): built-in defaults, the ``--config`` file,
explicit command-line flags. Unknown keys and wrongly typed values are
rejected with :class:`ConfigError`.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

import tomli

from .encoder import EncoderConfig
from .field import FieldConfig
from .model import LossSwitches, ModelConfig
from .prsamp import SURFACE_GRAD_MODES
from .recon import SchemeConfig, VolumeSpec
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Config:
    seed: int = 0
    # scene / dataset
    n_objects: int = 4
    n_frames: int = 12
    image_width: int = 64
    image_height: int = 48
    focal: float = 48.0
    frame_step: float = 0.4
    yaw_jitter: float = 3.0
    lateral_jitter: float = 0.15
    # model
    t_near: float = 0.2
    t_far: float = 25.0
    n_gaussians: int = 4
    samples_per_gaussian: int = 8
    pos_freqs: int = 10
    dir_freqs: int = 4
    hidden: int = 64
    depth: int = 4
    std_floor: float = 0.05
    surface_grad: str = "mixture"
    min_weight: float = 0.5
    sphere_grid: int = 64
    fov_extra_deg: float = 40.0
    # training
    epochs: int = 200
    steps_per_epoch: int = 20
    rays_per_batch: int = 256
    lr: float = 5e-3
    gamma: float = 0.99
    weight_decay: float = 0.0
    loss_rgb: bool = True
    loss_reproj: bool = True
    loss_samp: bool = True
    # reconstruction scheme
    pose_step: float = 0.5
    max_dist: float = 4.0
    yaws: tuple = (-10.0, 0.0, 10.0)
    include_origin: bool = True
    volume_origin: tuple = (-6.4, -3.3, 0.0)
    voxel_size: float = 0.4
    volume_dims: tuple = (32, 13, 36)
    truncation_voxels: float = 5.0
    occ_slope: float = 0.0
    occ_cap: float = 0.0
    fusion: str = "min"
    render_scale: float = 1.0
    # evaluation
    depth_cap: float = 80.0

    def __post_init__(self):
        problems = []
        if self.t_near <= 0 or self.t_far <= self.t_near:
            problems.append("need 0 < t_near < t_far")
        if self.n_frames < 2:
            problems.append("n_frames must be >= 2")
        if self.surface_grad not in SURFACE_GRAD_MODES:
            problems.append(f"surface_grad must be one of {list(SURFACE_GRAD_MODES)}")
        if self.fusion not in ("min", "avg"):
            problems.append("fusion must be 'min' or 'avg'")
        if len(self.volume_origin) != 3 or len(self.volume_dims) != 3:
            problems.append("volume_origin and volume_dims need 3 entries")
        if any(d < 2 for d in self.volume_dims) or self.voxel_size <= 0:
            problems.append("volume needs >= 2 voxels per axis and a positive voxel_size")
        if self.pose_step <= 0 or self.max_dist < self.pose_step:
            problems.append("need pose_step > 0 and max_dist >= pose_step")
        if not self.yaws:
            problems.append("yaws must not be empty")
        if not 0 < self.gamma <= 1:
            problems.append("gamma must lie in (0, 1]")
        if self.epochs < 0 or self.steps_per_epoch < 1 or self.rays_per_batch < 1:
            problems.append("epochs >= 0, steps_per_epoch >= 1, rays_per_batch >= 1 required")
        if self.seed < 0 or self.seed >= 2**64:
            problems.append("seed must be an unsigned 64-bit integer")
        if problems:
            raise ConfigError("; ".join(problems))

    # -- derived sub-configs -------------------------------------------------

    def model(self) -> ModelConfig:
        return ModelConfig(
            encoder=EncoderConfig(grid_hw=(self.sphere_grid, self.sphere_grid), fov_extra_deg=self.fov_extra_deg),
            field=FieldConfig(pos_freqs=self.pos_freqs, dir_freqs=self.dir_freqs, hidden=self.hidden,
                              depth=self.depth, n_gaussians=self.n_gaussians),
            t_near=self.t_near, t_far=self.t_far, samples_per_gaussian=self.samples_per_gaussian, std_floor=self.std_floor,
            min_weight=self.min_weight, surface_grad=self.surface_grad,
        )

    def train(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, steps_per_epoch=self.steps_per_epoch, rays_per_batch=self.rays_per_batch,
            lr=self.lr, gamma=self.gamma, weight_decay=self.weight_decay, seed=self.seed,
            switches=LossSwitches(self.loss_rgb, self.loss_reproj, self.loss_samp),
        )

    def scheme(self) -> SchemeConfig:
        return SchemeConfig(
            pose_step=self.pose_step, max_dist=self.max_dist, yaws_deg=tuple(self.yaws), include_origin=self.include_origin,
            volume=VolumeSpec(tuple(self.volume_origin), self.voxel_size, tuple(self.volume_dims)),
            truncation_voxels=self.truncation_voxels, occ_slope=self.occ_slope, occ_cap=self.occ_cap,
            fusion=self.fusion, render_scale=self.render_scale,
        )

    def to_dict(self) -> dict:
        return {f.name: list(v) if isinstance(v := getattr(self, f.name), tuple) else v for f in fields(self)}

    def replace(self, **changes) -> "Config":
        return from_dict({**self.to_dict(), **changes})


def _coerce(name: str, default, value):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{name}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{name}: expected an array, got {value!r}")
        elem = default[0] if default else 0.0
        return tuple(_coerce(f"{name}[{i}]", elem, v) for i, v in enumerate(value))
    raise ConfigError(f"{name}: unsupported type")  # pragma: no cover


def from_dict(values: dict) -> Config:
    defaults = Config()
    known = {f.name for f in fields(Config)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    kwargs = {k: _coerce(k, getattr(defaults, k), v) for k, v in values.items()}
    return dataclasses.replace(defaults, **kwargs)


def load_config(path=None, overrides: dict | None = None) -> Config:
    """Defaults, then the TOML file at ``path``, then ``overrides`` (None values skipped)."""
    values = {}
    if path is not None:
        path = Path(path)
        try:
            with open(path, "rb") as fh:
                values = tomli.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        nested = [k for k, v in values.items() if isinstance(v, dict)]
        if nested:
            raise ConfigError(f"config must be flat; found table(s): {', '.join(nested)}")
    for k, v in (overrides or {}).items():
        if v is not None:
            values[k] = v
    return from_dict(values)


def dump_toml(cfg: Config) -> str:
    """Render a config as flat TOML (round-trips through :func:`load_config`)."""
    lines = []
    for k, v in cfg.to_dict().items():
        lines.append(f"{k} = {_toml_value(v)}")
    return "\n".join(lines) + "\n"


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    return "[" + ", ".join(_toml_value(x) for x in v) + "]"
