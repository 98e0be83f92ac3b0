import numpy as np
import pytest

from driverval import synthgen as sg
from driverval.reward import DEFAULT_CONSTANTS, SceneContext
from driverval.trajdata import layout_from_markings

TWO_LANES = (0.0, 3.75, 7.5)
THREE_LANES = (0.0, 3.75, 7.5, 11.25)


@pytest.fixture(scope="session")
def layout2():
    return layout_from_markings(TWO_LANES)


@pytest.fixture(scope="session")
def layout3():
    return layout_from_markings(THREE_LANES)


def random_scene(rng, layout, horizon, n_neighbors=3, constants=DEFAULT_CONSTANTS):
    """Neighbors scattered around the ego start (some absent at some frames)."""
    nb = np.empty((n_neighbors, horizon, 2))
    for o in range(n_neighbors):
        x0 = rng.uniform(-25, 25)
        y0 = rng.uniform(layout.road_boundary_low, layout.road_boundary_high)
        vx = rng.uniform(-3, 3)
        nb[o, :, 0] = x0 + vx * 0.04 * np.arange(1, horizon + 1)
        nb[o, :, 1] = y0
    if n_neighbors and rng.random() < 0.5:
        nb[0, rng.integers(horizon):, :] = np.nan
    return SceneContext(layout, nb, float(rng.uniform(20, 35)), constants)


@pytest.fixture(scope="session")
def known_demo():
    """Agent-generated demonstration from the documented example weights."""
    theta = np.array([-1.0, 3.0, -3.0, -20.0])
    return theta, sg.generate_demo(theta, sg.lane_change_scenario(0), 200)


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    sg.synthetic_corpus(d, seed=11)
    return d
