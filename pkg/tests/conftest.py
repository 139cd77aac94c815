import numpy as np
import pytest

from vesselgen.kernels import backends
from vesselgen.preprocess import preprocess_skeleton
from vesselgen.synth import SynthConfig, generate_tree

BACKENDS = sorted(backends())


@pytest.fixture(params=BACKENDS)
def kernel_impl(request):
    return backends()[request.param]


def small_trees(n, depth=(1, 2), seed=100):
    cfg = SynthConfig(depth_range=depth)
    return [generate_tree(cfg, np.random.default_rng(seed + i)) for i in range(n)]


@pytest.fixture(scope="session")
def trees():
    return small_trees(6)


@pytest.fixture(scope="session")
def samples(trees):
    return [preprocess_skeleton(t) for t in trees]
