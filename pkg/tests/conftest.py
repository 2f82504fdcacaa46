import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from optembed.data import FieldSchema  # noqa: E402
from optembed.kernels import available_backends  # noqa: E402


def make_schema(cards):
    """Schema whose field i has ``cards[i]`` rows (one OOV + named tokens)."""
    vocabs = [{f"v{j}": j for j in range(1, c)} for c in cards]
    return FieldSchema([f"f{i}" for i in range(len(cards))], ["categorical"] * len(cards), vocabs)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=sorted(available_backends()))
def backend(request):
    return request.param, available_backends()[request.param]
