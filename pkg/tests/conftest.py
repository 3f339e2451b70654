import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from monorf.geometry import Intrinsics

settings.register_profile(
    "repo", deadline=None, derandomize=True, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("repo")


@pytest.fixture
def K():
    return Intrinsics(48.0, 48.0, 31.5, 23.5, 64, 48)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """A 32x24, five-frame sequence of the default scene."""
    from monorf.scenegen import SequenceSpec, default_camera, default_heldout, default_scene, forward_trajectory
    from monorf.scenegen import generate_sequence, load_dataset

    root = tmp_path_factory.mktemp("tiny_ds")
    spec = SequenceSpec(default_camera(32, 24, 24.0), forward_trajectory(5), default_heldout(n_frames=5))
    generate_sequence(default_scene(0), spec, root)
    return load_dataset(root)


@pytest.fixture(scope="session")
def tiny_model():
    from monorf.encoder import EncoderConfig
    from monorf.field import FieldConfig
    from monorf.model import ModelConfig

    return ModelConfig(
        encoder=EncoderConfig(channels=(4, 6, 8), grid_hw=(12, 12)),
        field=FieldConfig(feat_channels=8, pos_freqs=3, dir_freqs=1, hidden=16, depth=2, gauss_hidden=16, n_gaussians=4),
        chunk_rays=16,
    )


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
