"""Shared pytest configuration: import path, hypothesis profiles and small fixtures."""

import os
import sys
from pathlib import Path

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent.parent))

import hypothesis
import numpy as np
import pytest

np.seterr(all="warn")

hypothesis.settings.register_profile("fast", max_examples=10, deadline=None)
hypothesis.settings.register_profile("thorough", max_examples=200, deadline=None)
hypothesis.settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "fast"))


@pytest.fixture
def rng():
    """Seeded generator so every test sees the same draws."""
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def single_thread():
    """Reset the worker count after tests that change it."""
    from hisop.numerics import set_num_threads

    set_num_threads(1)
    yield
    set_num_threads(1)
