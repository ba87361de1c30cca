import numpy as np
import pytest

from cube_lattice import Cube, CubeTree, build_christ_david, build_net_hierarchy, default_levels
from metric_core import MetricSpaceSample
from space_generators import GeneratorSpec, generate


def build_tree(space, rho=0.25, c0=1 / 32, seed=0):
    k_min, k_max = default_levels(space, rho)
    return build_christ_david(build_net_hierarchy(space, rho, k_min, k_max, seed=seed), c0)


def binary_tree(depth: int) -> CubeTree:
    """Dyadic tree on 2^depth equally weighted points of [0, 1], rho = 1/2."""
    m = 2 ** depth
    u = (np.arange(m) + 0.5) / m
    space = MetricSpaceSample(np.full(m, 1 / m), 1, coords=u[:, None], name="binary")
    cubes = []
    for level in range(depth + 1):
        block = 2 ** (depth - level)
        for b in range(2 ** level):
            cid = len(cubes)
            parent = None
            if level:
                parent = (2 ** (level - 1) - 1) + b // 2
                cubes[parent].children.append(cid)
            members = np.arange(b * block, (b + 1) * block)
            cubes.append(Cube(cid, level, int(members[0]), 5 * 0.5 ** level, members, parent))
    return CubeTree(space, 0.5, 1 / 32, cubes)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def segment():
    return generate(GeneratorSpec(kind="segment", spacing=1 / 1024))


@pytest.fixture(scope="session")
def segment_tree(segment):
    return build_tree(segment)


@pytest.fixture(scope="session")
def fine_segment():
    return generate(GeneratorSpec(kind="segment", spacing=1 / 2048))


@pytest.fixture(scope="session")
def bilip():
    return generate(GeneratorSpec(kind="bilip_curve", spacing=1 / 1024))
