import os
import sys

import hypothesis
import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from core.heap_model import PanelData  # noqa: E402

hypothesis.settings.register_profile("fast", max_examples=10, deadline=None)
hypothesis.settings.register_profile("ci", max_examples=100, deadline=None)
hypothesis.settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "fast"))


@pytest.fixture
def small_panel():
    """Three subjects with heaped-looking reports."""
    return PanelData.from_arrays(
        subject_ids=[0, 0, 1, 1, 2, 2],
        time=[0, 1, 0, 1, 0, 1],
        y=[10, 12, 5, 0, 20, 25],
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
