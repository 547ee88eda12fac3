import numpy as np
import pytest
import torch

from rascore.joints import N_LANDMARKS, LandmarkSet

torch.set_num_threads(max(1, torch.get_num_threads()))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def random_landmarks(rng, width=400, height=320, margin=8) -> LandmarkSet:
    """74 random in-bounds points with distinct wrist endpoints per hand."""
    while True:
        pts = np.column_stack([
            rng.uniform(margin, width - margin, N_LANDMARKS),
            rng.uniform(margin, height - margin, N_LANDMARKS),
        ])
        wrists = pts[[0, 1, 37, 38]]
        if (np.hypot(*(wrists[0] - wrists[1])) > 1.0
                and np.hypot(*(wrists[2] - wrists[3])) > 1.0):
            return LandmarkSet(pts)
