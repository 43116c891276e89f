"""Shared fixtures: the committed toy bench and the head that reads it.

The suite is loaded once per session through the same loaders the CLI
uses, so every test sees exactly the world the golden numbers were
calibrated against (component means quantized to float32 by the latent
container).
"""

import os

import pytest

from lomoe.pipeline import head_for_world
from lomoe.toybench import load_suite

SUITE_ROOT = os.path.normpath(
    os.path.join(os.path.dirname(__file__), os.pardir, "toybench")
)


@pytest.fixture(scope="session")
def suite_root() -> str:
    return SUITE_ROOT


@pytest.fixture(scope="session")
def suite():
    return load_suite(SUITE_ROOT)


@pytest.fixture(scope="session")
def world(suite):
    return suite[0]


@pytest.fixture(scope="session")
def cases(suite):
    return suite[1]


@pytest.fixture(scope="session")
def head(world):
    return head_for_world(world)
