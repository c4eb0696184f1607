import numpy as np
import pytest

from dart.model import build_model, toy_config
from dart.scenes import SceneSpec, generate_scene


@pytest.fixture(scope="session")
def toy_model():
    return build_model(toy_config(seed=0))


@pytest.fixture(scope="session")
def sample_image():
    image, _ = generate_scene(SceneSpec(seed=1, num_classes=3))
    return image


@pytest.fixture(scope="session")
def zero_image(toy_model):
    s = toy_model.config.image_size
    return np.zeros((s, s, 3))
