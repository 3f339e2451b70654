"""Single-image conditioned radiance field on toy synthetic scenes: mixture-guided
ray sampling, self-supervised training, novel depth synthesis and TSDF-based
scene reconstruction, in plain numpy."""

__version__ = "0.1.0"
