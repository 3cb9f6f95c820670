import numpy as np
import pytest

from rprloc.phantom import JitterSpec, OrganSpec, PhantomSpec
from rprloc.volgrid import Volume


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_spec():
    """Reduced phantom grid for fast per-module tests."""
    return PhantomSpec(
        grid_shape=(32, 48, 48),
        spacing=(2.0, 2.0, 2.0),
        organs=(
            OrganSpec("stem", (0.35, 0.42, 0.46), (8.0, 10.0, 10.0), 0.85),
            OrganSpec("keel", (0.65, 0.62, 0.62), (9.0, 8.0, 11.0), 0.45),
        ),
        jitter=JitterSpec(center_sd=2.0, radii_sd=0.8, global_warp=0.06),
        seed=7,
    )


@pytest.fixture
def noise_volume(rng):
    data = rng.random((12, 16, 20)).astype(np.float32)
    return Volume(data=data, spacing=(2.0, 1.0, 1.5), intensity_unit="normalized")


@pytest.fixture
def constant_volume():
    return Volume(data=np.full((8, 8, 8), 7.0, dtype=np.float32), spacing=(1, 1, 1))
