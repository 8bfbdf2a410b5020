import numpy as np
import pytest
from hypothesis import settings

from semgate.geometry import CameraIntrinsics
from semgate.sim import ScenarioConfig

settings.register_profile("semgate", deadline=None, max_examples=100, derandomize=True)
settings.load_profile("semgate")

STATIC_MIX = dict(BUILDING=0.3, POLE=0.15, ROAD_MARKING=0.1, PAVEMENT=0.1, TREE=0.2, SIGN_SYMBOL=0.05, FENCE=0.1)


def mix(**props):
    from semgate.semantic import SemanticClass

    out = [0.0] * 12
    for name, p in props.items():
        out[int(SemanticClass[name])] = p
    return tuple(out)


def small_config(**overrides) -> ScenarioConfig:
    """A short loop that simulates, maps and localizes in a second or two."""
    base = dict(
        seed=11,
        path=((0, 0), (40, 0), (40, 30), (0, 30)),
        speed=10.0,
        n_landmarks=250,
        class_mix=mix(**STATIC_MIX),
        dynamic_fraction=0.0,
        max_view_distance=25.0,
        intrinsics=CameraIntrinsics(400.0, 400.0, 320.0, 240.0, 640, 480),
    )
    base.update(overrides)
    return ScenarioConfig(**base)


def noiseless(cfg: ScenarioConfig) -> ScenarioConfig:
    from dataclasses import replace

    return replace(cfg, pixel_noise_std=0.0, odom_noise=(0.0, 0.0), gps_noise_std=0.0, label_error_rate=0.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance criteria report one line each in the terminal summary
CRITERIA: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        terminalreporter.write_line(CRITERIA[n])
