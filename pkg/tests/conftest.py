"""Shared test fixtures for cbrw-lab."""

from __future__ import annotations

import numpy as np
import pytest

from cbrw_lab.lattice_walk import JumpLaw, simple_random_walk
from cbrw_lab.offspring import OffspringLaw, make_law
from cbrw_lab.streams import StreamFactory


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(20240601)


@pytest.fixture()
def streams() -> StreamFactory:
    return StreamFactory(seed=12345)


@pytest.fixture()
def srw1() -> JumpLaw:
    return simple_random_walk(1)


@pytest.fixture()
def srw2() -> JumpLaw:
    return simple_random_walk(2)


@pytest.fixture()
def srw3() -> JumpLaw:
    return simple_random_walk(3)


@pytest.fixture()
def srw4() -> JumpLaw:
    return simple_random_walk(4)


@pytest.fixture()
def srw5() -> JumpLaw:
    return simple_random_walk(5)


@pytest.fixture()
def geometric() -> OffspringLaw:
    return make_law("geometric")


@pytest.fixture()
def binary() -> OffspringLaw:
    return make_law("binary")
