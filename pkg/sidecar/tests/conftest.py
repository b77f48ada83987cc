import numpy as np
import pytest

from sdsidecar.model import load_model
from sdsidecar.service import SidecarConfig


@pytest.fixture(scope="session")
def model():
    return load_model("tiny", seed=0)


@pytest.fixture()
def cfg():
    return SidecarConfig()


@pytest.fixture(scope="session")
def photo():
    """A photo-like test image: smooth gradients, a disc, and sensor noise."""
    rng = np.random.default_rng(0)
    yy, xx = np.mgrid[0:96, 0:96] / 96.0
    img = np.stack([0.25 + 0.55 * xx,
                    0.35 + 0.35 * yy,
                    0.5 + 0.2 * np.sin(6.28 * xx) * np.cos(3.1 * yy)], axis=-1)
    disc = (xx - 0.6) ** 2 + (yy - 0.4) ** 2 < 0.05
    img[disc] = [0.8, 0.3, 0.2]
    img += 0.04 * rng.standard_normal(img.shape)
    return np.clip(img, 0, 1).astype(np.float32)
