"""Core encoding operator: forward/adjoint correctness against dense oracles."""

import numpy as np
import pytest

from conftest import random_operator, random_stack
from oracles import dense_forward_matrix

from smsrecon.operators import (
    KSpaceVolume,
    SliceStackImage,
    adjoint_sms,
    apply_fov_shift,
    concat_slices,
    default_caipi_shifts,
    fft2c,
    forward_sms,
    full_mask,
    split_stack,
    uniform_mask,
)


def vec(a):
    return np.asarray(a).reshape(-1)


# operator configurations exercised by the adjoint/dense checks: mix of even
# grids, shifts, coil counts and accelerations
OPERATOR_CONFIGS = [
    dict(seed=7, num_slices=2, num_coils=2, grid=(4, 4), r=2),
    dict(seed=3, num_slices=3, num_coils=4, grid=(6, 6), r=2),
    dict(seed=11, num_slices=1, num_coils=3, grid=(4, 6), r=1),
    dict(seed=5, num_slices=2, num_coils=2, grid=(8, 4), r=2, shifts=(0.0, 0.25)),
]


def test_forward_of_zeros_is_zero(tiny_operator):
    x = SliceStackImage(
        data=np.zeros((tiny_operator.num_slices * 4, 4), dtype=complex), num_slices=2
    )
    y = forward_sms(x, tiny_operator)
    assert np.all(y.data == 0)


def test_single_slice_unit_coil_reduces_to_dft():
    m, n = 8, 8
    maps = np.ones((1, 1, m, n), dtype=complex)
    e = random_operator(0, num_slices=1, num_coils=1, grid=(m, n), r=1, shifts=(0.0,))
    e = e.__class__(
        sens=e.sens.__class__(maps=maps), mask=full_mask((m, n)), fov_shifts=(0.0,)
    )
    rng = np.random.default_rng(1)
    x = SliceStackImage(
        data=rng.standard_normal((m, n)) + 1j * rng.standard_normal((m, n)), num_slices=1
    )
    y = forward_sms(x, e)
    assert np.abs(y.data[0] - fft2c(x.data)).max() < 1e-12


@pytest.mark.parametrize("cfg", OPERATOR_CONFIGS)
def test_forward_matches_dense_oracle(cfg):
    e = random_operator(**cfg)
    edense = dense_forward_matrix(e)
    x = random_stack(cfg["seed"] + 100, e)
    y = forward_sms(x, e)
    assert np.abs(vec(y.data) - edense @ vec(x.data)).max() < 1e-12


@pytest.mark.parametrize("cfg", OPERATOR_CONFIGS)
def test_adjoint_matches_dense_oracle(cfg):
    e = random_operator(**cfg)
    edense = dense_forward_matrix(e)
    rng = np.random.default_rng(cfg["seed"] + 200)
    m, n = e.grid
    y = KSpaceVolume(
        data=rng.standard_normal((e.num_coils, m, n))
        + 1j * rng.standard_normal((e.num_coils, m, n))
    )
    x = adjoint_sms(y, e)
    assert np.abs(vec(x.data) - edense.conj().T @ vec(y.data)).max() < 1e-12


def test_adjoint_of_zeros_is_zero(tiny_operator):
    y = KSpaceVolume(data=np.zeros((2, 4, 4), dtype=complex))
    x = adjoint_sms(y, tiny_operator)
    assert np.all(x.data == 0)


@pytest.mark.parametrize("cfg", OPERATOR_CONFIGS)
def test_dot_product_adjoint_100_trials(cfg):
    e = random_operator(**cfg)
    m, n = e.grid
    rng = np.random.default_rng(cfg["seed"] + 300)
    for _ in range(100):
        x = SliceStackImage(
            data=rng.standard_normal((e.num_slices * m, n))
            + 1j * rng.standard_normal((e.num_slices * m, n)),
            num_slices=e.num_slices,
        )
        y = KSpaceVolume(
            data=rng.standard_normal((e.num_coils, m, n))
            + 1j * rng.standard_normal((e.num_coils, m, n))
        )
        ex = forward_sms(x, e)
        ehy = adjoint_sms(y, e)
        lhs = np.vdot(vec(y.data), vec(ex.data))
        rhs = np.vdot(vec(ehy.data), vec(x.data))
        scale = np.linalg.norm(vec(ex.data)) * np.linalg.norm(vec(y.data))
        assert abs(lhs - rhs) / scale < 1e-10


def test_linearity(tiny_operator):
    e = tiny_operator
    x1, x2 = random_stack(1, e), random_stack(2, e)
    a, b = 1.7 - 0.3j, -0.4 + 2.1j
    combo = SliceStackImage(data=a * x1.data + b * x2.data, num_slices=e.num_slices)
    lhs = forward_sms(combo, e).data
    rhs = a * forward_sms(x1, e).data + b * forward_sms(x2, e).data
    assert np.abs(lhs - rhs).max() / np.abs(rhs).max() < 1e-12


def test_mask_idempotent(tiny_operator):
    e = tiny_operator
    y = forward_sms(random_stack(3, e), e)
    once = e.mask.apply(y.data)
    twice = e.mask.apply(once)
    assert np.array_equal(once, twice)


def test_forward_shape_mismatch_rejected(tiny_operator):
    bad = SliceStackImage(data=np.zeros((6, 4), dtype=complex), num_slices=2)
    with pytest.raises(ValueError):
        forward_sms(bad, tiny_operator)
    bad_y = KSpaceVolume(data=np.zeros((3, 4, 4), dtype=complex))
    with pytest.raises(ValueError):
        adjoint_sms(bad_y, tiny_operator)


def test_zero_slices_rejected():
    with pytest.raises(ValueError):
        SliceStackImage(data=np.zeros((4, 4), dtype=complex), num_slices=0)


class TestFovShift:
    def test_zero_shift_is_identity(self):
        rng = np.random.default_rng(0)
        img = rng.standard_normal((4, 8)) + 1j * rng.standard_normal((4, 8))
        assert np.array_equal(apply_fov_shift(img, 0.0), img)

    def test_half_shift_then_inverse(self):
        rng = np.random.default_rng(1)
        img = rng.standard_normal((4, 8)) + 1j * rng.standard_normal((4, 8))
        out = apply_fov_shift(apply_fov_shift(img, 0.5), 0.5, inverse=True)
        assert np.abs(out - img).max() < 1e-12

    def test_fractional_shift_roundtrip(self):
        rng = np.random.default_rng(2)
        img = rng.standard_normal((4, 6)) + 1j * rng.standard_normal((4, 6))
        out = apply_fov_shift(apply_fov_shift(img, 1 / 3), 1 / 3, inverse=True)
        assert np.abs(out - img).max() < 1e-12

    def test_quarter_shift_moves_impulse(self):
        n = 16
        for r in [0, 3, 13]:
            img = np.zeros((1, n), dtype=complex)
            img[0, r] = 1.0
            out = apply_fov_shift(img, 0.25)
            expected = np.zeros((1, n), dtype=complex)
            expected[0, (r + n // 4) % n] = 1.0
            assert np.abs(out - expected).max() < 1e-12

    def test_shift_fraction_bounds(self):
        with pytest.raises(ValueError):
            apply_fov_shift(np.zeros((2, 4), dtype=complex), 1.5)


class TestStack:
    def test_split_concat_roundtrip_bit_exact(self):
        rng = np.random.default_rng(4)
        x = SliceStackImage(
            data=rng.standard_normal((12, 5)) + 1j * rng.standard_normal((12, 5)),
            num_slices=3,
        )
        back = concat_slices(split_stack(x))
        assert np.array_equal(back.data, x.data)
        assert back.num_slices == 3

    def test_single_slice_split(self):
        x = SliceStackImage(data=np.ones((4, 4), dtype=complex), num_slices=1)
        parts = split_stack(x)
        assert len(parts) == 1
        assert np.array_equal(parts[0], x.data)

    def test_five_slices_readout_concat_shape(self):
        # SMS factor 5 at 64 readout points stacks to 320 rows
        slices = [np.zeros((64, 32), dtype=complex) for _ in range(5)]
        stack = concat_slices(slices)
        assert stack.data.shape == (320, 32)
        assert stack.slice_extent == 64

    def test_inconsistent_shapes_rejected(self):
        with pytest.raises(ValueError):
            concat_slices([np.zeros((4, 4), dtype=complex), np.zeros((4, 5), dtype=complex)])


def test_default_caipi_shift_schedule():
    assert default_caipi_shifts(1) == (0.0,)
    assert default_caipi_shifts(3) == (0.0, 1 / 3, 2 / 3)


def test_uniform_mask_counts():
    mask = uniform_mask((64, 64), r=2)
    assert mask.num_kept == 64 * 64 // 2
    with_acs = uniform_mask((64, 64), r=2, acs_lines=24)
    assert with_acs.num_kept == 64 * (32 + 12)
