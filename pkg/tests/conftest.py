import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from smsrecon.operators import (
    CoilSensitivities,
    SamplingMask,
    SliceStackImage,
    SmsEncodingOperator,
    uniform_mask,
)


def random_operator(seed, num_slices=2, num_coils=2, grid=(4, 4), r=2, shifts=None):
    """Small randomized encoding operator for oracle-scale tests.

    Sensitivities are random smooth-ish complex maps, SOS-normalized so the
    operator is well scaled.
    """
    rng = np.random.default_rng(seed)
    m, n = grid
    maps = rng.standard_normal((num_slices, num_coils, m, n)) + 1j * rng.standard_normal(
        (num_slices, num_coils, m, n)
    )
    sos = np.sqrt(np.sum(np.abs(maps) ** 2, axis=1, keepdims=True))
    maps = maps / sos
    mask = uniform_mask(grid, r)
    return SmsEncodingOperator(sens=CoilSensitivities(maps=maps), mask=mask, fov_shifts=shifts)


def random_stack(seed, e):
    rng = np.random.default_rng(seed)
    m, n = e.grid
    data = rng.standard_normal((e.num_slices * m, n)) + 1j * rng.standard_normal(
        (e.num_slices * m, n)
    )
    return SliceStackImage(data=data, num_slices=e.num_slices)


@pytest.fixture
def tiny_operator():
    """The 'tiny instance' used against dense oracles: M=N=4, S=2, 2 coils, R=2."""
    return random_operator(seed=7)
