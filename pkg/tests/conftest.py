import numpy as np
import pytest

from isounfit.mesh import make_rect_mesh


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def square8():
    return make_rect_mesh((-1.0, -1.0), (1.0, 1.0), 8)


def random_points_in_reference(rng, n):
    a, b = rng.uniform(size=(2, n))
    fold = a + b > 1
    a[fold], b[fold] = 1 - a[fold], 1 - b[fold]
    return np.stack([a, b], axis=1)
