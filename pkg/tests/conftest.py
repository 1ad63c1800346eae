import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")
warnings.filterwarnings("ignore", message="The TBB threading layer")

SPHERE_SCENE = {
    "version": "1",
    "object": {"type": "sphere", "radius": 1.0, "rho_s": 0.8, "albedo": [0.2, 0.15, 0.1]},
    "environment": [
        {"type": "dome", "radius": 5.0, "texture": {"type": "smooth", "seed": 3}},
        {"type": "quad", "center": [0.0, 0.0, 2.2], "half_u": [0.8, 0.0, 0.0], "half_v": [0.0, 0.8, 0.0],
         "texture": [0.9, 0.1, 0.1]},
    ],
    "cameras": {"rig": "orbit", "count": 8, "radius": 3.5, "elevation": 20.0, "fov": 40.0},
    "render": {"width": 24, "height": 24, "samples": 1},
}


def scene_dict(**overrides):
    import copy

    d = copy.deepcopy(SPHERE_SCENE)
    for k, v in overrides.items():
        if isinstance(v, dict) and isinstance(d.get(k), dict):
            d[k].update(v)
        else:
            d[k] = v
    return d


@pytest.fixture
def sphere_scene():
    from glosscam.scene import scene_from_dict

    return scene_from_dict(scene_dict())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
