import numpy as np
import pytest

from armcache.cachesim import Hierarchy, load_profile
from armcache.memspace import PhysicalMemory, ProcessSpace


@pytest.fixture(scope="session")
def galaxy():
    return load_profile("galaxy-s6")


@pytest.fixture(scope="session")
def alcatel():
    return load_profile("alcatel-pop2")


@pytest.fixture(scope="session")
def oneplus():
    return load_profile("oneplus-one")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def spaces(profile, *names, seed=0, restricted=False):
    mem = PhysicalMemory(profile.physical_memory, profile.page_size, seed=seed)
    return [ProcessSpace(n, mem, pagemap_restricted=restricted) for n in names]
