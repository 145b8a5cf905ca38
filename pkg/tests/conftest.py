import numpy as np
import pytest

from tspifu.capture import Rig, render_views, sphere_capsule_scene
from tspifu.geometry import ViewTriplet


@pytest.fixture(scope="session")
def scene():
    return sphere_capsule_scene()


@pytest.fixture(scope="session")
def small_views(scene):
    """Noise-free 32 px renders on the default three-camera rig."""
    return ViewTriplet(render_views(scene, Rig(image_size=32).cameras()))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
