import os
import sys

import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from scalegraph.ident import IdSpace

SCENARIO_DIR = os.path.join(os.path.dirname(__file__), "..", "scenarios")


@pytest.fixture
def space32():
    return IdSpace(32)


@pytest.fixture
def space8():
    return IdSpace(8)


def scenario_path(name: str) -> str:
    return os.path.join(SCENARIO_DIR, name)
