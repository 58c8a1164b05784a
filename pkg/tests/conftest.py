import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_radar():
    from rdfield.renderer import RadarConfig

    return RadarConfig(32, 16, 4, 0.2, 0.1, circle_samples=16, sampler="linear")


def tiny_dataset(seed: int = 3, noise_level: float = 2e-4, n_frames: int = 20, true_scale: float = 1.0):
    from rdfield.renderer import CameraIntrinsics
    from rdfield.synth import TrajectorySpec, general_scene, generate_dataset

    return generate_dataset(general_scene(1), TrajectorySpec(n_frames=n_frames), tiny_radar(),
                            CameraIntrinsics(16, 12), seed=seed, true_scale=true_scale,
                            noise_level=noise_level, resolution=24)


@pytest.fixture(scope="session")
def tiny():
    return tiny_dataset()


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS):
            terminalreporter.write_line(line)
