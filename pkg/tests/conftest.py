import numpy as np
import pytest

from spal.pcio import PointCloud


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_cloud(rng, n=50, num_classes=3, with_color=False, cid="c0"):
    pts = rng.uniform(-1.0, 1.0, size=(n, 3))
    labels = rng.integers(0, num_classes, size=n)
    colors = rng.uniform(0.0, 1.0, size=(n, 3)) if with_color else None
    return PointCloud(id=cid, points=pts, gt_labels=labels, colors=colors)


@pytest.fixture
def cloud_factory():
    return random_cloud
