"""Simulator: phantoms, coil maps, activation time courses, sampled k-space."""

import numpy as np
import pytest

from smsrecon.operators import (
    CoilSensitivities,
    SamplingMask,
    SliceStackImage,
    SmsEncodingOperator,
    adjoint_sms,
    forward_sms,
    full_mask,
    uniform_mask,
)
from smsrecon.phantom import (
    ActivationSpec,
    Ellipse,
    NoiseModel,
    PhantomSpec,
    collapse_sms,
    frame_stack,
    make_phantom,
    make_retinotopy_activation,
    make_sensitivities,
    random_phantom_spec,
    sample_kspace,
    sigma_for_snr,
    simulate_timeseries,
    single_band_kspace,
)


def desk_spec(seed=0, grid=(32, 32), s=2, c=4):
    return random_phantom_spec(grid, s, c, seed=seed)


class TestPhantom:
    def test_empty_ellipse_list_gives_zeros(self):
        spec = PhantomSpec(grid=(16, 16), num_slices=2, num_coils=1, ellipses=((), ()), seed=0)
        assert np.all(make_phantom(spec).data == 0)

    def test_same_seed_bit_identical(self):
        a = make_phantom(desk_spec(seed=5))
        b = make_phantom(desk_spec(seed=5))
        assert np.array_equal(a.data, b.data)

    def test_different_seed_differs(self):
        a = make_phantom(desk_spec(seed=5))
        b = make_phantom(desk_spec(seed=6))
        assert not np.array_equal(a.data, b.data)

    def test_single_ellipse_total_intensity_matches_area(self):
        m = n = 128
        ell = Ellipse(center=(0.0, 0.0), axes=(0.5, 0.35), angle=0.3, intensity=0.8)
        spec = PhantomSpec(grid=(m, n), num_slices=1, num_coils=1, ellipses=((ell,),), seed=0)
        total = np.abs(make_phantom(spec).data).sum()
        analytic = 0.8 * np.pi * 0.5 * 0.35 * m * n / 4
        assert abs(total - analytic) / analytic < 0.02

    def test_intensity_bounds_enforced(self):
        with pytest.raises(ValueError):
            Ellipse(center=(0, 0), axes=(0.5, 0.5), intensity=1.2)


class TestSensitivities:
    def test_single_coil_unit_magnitude(self):
        spec = desk_spec(c=1)
        sens = make_sensitivities(spec)
        assert np.allclose(np.abs(sens.maps), 1.0, atol=1e-12)

    def test_sos_normalized_every_pixel(self):
        sens = make_sensitivities(desk_spec(c=6))
        sos = np.sum(np.abs(sens.maps) ** 2, axis=1)
        assert np.abs(sos - 1.0).max() < 1e-12

    def test_fully_sampled_single_slice_recon_is_exact(self):
        # at R=1, S=1 the adjoint (coil combine) inverts the forward model
        spec = desk_spec(s=1, c=4)
        x = make_phantom(spec)
        sens = make_sensitivities(spec)
        e = SmsEncodingOperator(sens=sens, mask=full_mask(spec.grid), fov_shifts=(0.0,))
        recon = adjoint_sms(forward_sms(x, e), e)
        assert np.abs(recon.data - x.data).max() < 1e-12


class TestActivation:
    def test_zero_amplitude_gives_identical_frames(self):
        act = make_retinotopy_activation((16, 16), 1, amplitude=0.0, num_frames=64)
        spec = desk_spec(grid=(16, 16), s=1)
        x = make_phantom(spec)
        f0 = frame_stack(x, act, "ccw", 0).data
        f7 = frame_stack(x, act, "ccw", 7).data
        assert np.array_equal(f0, f7)

    def test_zero_phase_voxel_peaks_at_period_multiples(self):
        mask = np.zeros((8, 8), dtype=bool)
        mask[4, 4] = True
        act = ActivationSpec(
            mask=mask, phase=np.zeros((8, 8)), amplitude=0.1, task_period=32.0,
            repetition_time=1.0, num_frames=96,
        )
        course = np.array([act.modulation("ccw", t)[4, 4] for t in range(96)])
        peaks = np.flatnonzero(course == course.max())
        assert list(peaks) == [0, 32, 64]

    def test_noiseless_voxel_spectrum_single_offdc_bin(self):
        act = make_retinotopy_activation((16, 16), 1, amplitude=0.05, num_frames=64)
        spec = desk_spec(grid=(16, 16), s=1)
        x = make_phantom(spec)
        series = simulate_timeseries(x, act)["ccw"]
        vox = np.argwhere(act.mask & (np.abs(x.data) > 0.1))[0]
        course = np.abs(series[:, vox[0], vox[1]])
        spectrum = np.abs(np.fft.fft(course))
        task_bin = round(64 * 1.0 / 32.0)
        off_dc = spectrum.copy()
        off_dc[0] = 0
        # real course: task bin and its conjugate mirror carry all the energy
        assert np.argmax(off_dc) in (task_bin, 64 - task_bin)
        others = off_dc.copy()
        others[[task_bin, 64 - task_bin]] = 0
        assert others.max() < 1e-10 * spectrum[task_bin]

    def test_cw_run_is_time_reversed_ccw(self):
        act = make_retinotopy_activation((16, 16), 2, amplitude=0.08, num_frames=64)
        spec = desk_spec(grid=(16, 16), s=2)
        x = make_phantom(spec)
        series = simulate_timeseries(x, act)
        assert np.abs(series["cw"][::-1] - series["ccw"]).max() < 1e-10

    def test_too_few_frames_rejected(self):
        with pytest.raises(ValueError):
            make_retinotopy_activation((8, 8), 1, num_frames=48)  # < 2 cycles

    def test_non_integer_cycles_rejected(self):
        with pytest.raises(ValueError):
            make_retinotopy_activation((8, 8), 1, num_frames=100)


class TestSampling:
    def test_single_slice_full_mask_matches_forward(self):
        spec = desk_spec(s=1, c=3)
        x = make_phantom(spec)
        sens = make_sensitivities(spec)
        sb = single_band_kspace(x, sens)
        slab = sample_kspace(sb, full_mask(spec.grid), fov_shifts=(0.0,), noise=None)
        e = SmsEncodingOperator(sens=sens, mask=full_mask(spec.grid), fov_shifts=(0.0,))
        assert np.abs(slab.acquired.data - forward_sms(x, e).data).max() < 1e-12

    def test_collapse_matches_forward_with_shifts(self):
        spec = desk_spec(s=3, c=4)
        x = make_phantom(spec)
        sens = make_sensitivities(spec)
        e = SmsEncodingOperator(sens=sens, mask=full_mask(spec.grid))
        collapsed = collapse_sms(single_band_kspace(x, sens), e.fov_shifts)
        assert np.abs(collapsed - forward_sms(x, e).data).max() < 1e-12

    def test_acquired_sample_count(self):
        mask = uniform_mask((64, 64), r=2)
        assert mask.num_kept == 64 * 64 // 2

    def test_paper_settings_net_acceleration_10(self):
        # S=5 slices collapsed into one slab with R=2 in-plane skipping
        s, grid = 5, (64, 64)
        mask = uniform_mask(grid, r=2)
        full_samples = s * grid[0] * grid[1]
        acquired = mask.num_kept
        assert full_samples / acquired == 10.0

    def test_unacquired_locations_exactly_zero(self):
        spec = desk_spec(s=2, c=4)
        x = make_phantom(spec)
        sens = make_sensitivities(spec)
        sb = single_band_kspace(x, sens)
        mask = uniform_mask(spec.grid, r=2, acs_lines=8)
        noise = NoiseModel(sigma=0.05, seed=3)
        slab = sample_kspace(sb, mask, fov_shifts=(0.0, 0.5), noise=noise, stream=(0, 0))
        assert np.all(slab.acquired.data[:, ~mask.kept] == 0)
        assert np.all(slab.acquired.data[:, mask.kept] != 0)

    def test_noise_streams_deterministic_and_distinct(self):
        noise = NoiseModel(sigma=0.1, seed=9)
        a = noise.sample((4, 4), stream=(0, 1))
        b = noise.sample((4, 4), stream=(0, 1))
        c = noise.sample((4, 4), stream=(0, 2))
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_parseval_image_vs_kspace(self):
        spec = desk_spec(s=2, c=4)
        x = make_phantom(spec)
        sens = make_sensitivities(spec)
        act = make_retinotopy_activation(spec.grid, spec.num_slices, num_frames=64)
        for t in [0, 17]:
            stack = frame_stack(x, act, "ccw", t)
            sb = single_band_kspace(stack, sens)
            m, n = spec.grid
            coil_imgs = sens.maps * stack.data.reshape(spec.num_slices, 1, m, n)
            img_energy = np.sum(np.abs(coil_imgs) ** 2)
            ksp_energy = np.sum(np.abs(sb) ** 2)
            assert abs(img_energy - ksp_energy) / img_energy < 1e-10

    def test_calibration_block_geometry(self):
        spec = desk_spec(s=2, c=4, grid=(32, 32))
        x = make_phantom(spec)
        sens = make_sensitivities(spec)
        sb = single_band_kspace(x, sens)
        slab = sample_kspace(
            sb, uniform_mask(spec.grid, 2), fov_shifts=(0.0, 0.5), calib_shape=(16, 12)
        )
        assert slab.calibration.shape == (2, 4, 16, 12)
        lo_m, lo_n = slab.calibration_offset
        assert np.array_equal(
            slab.calibration, sb[:, :, lo_m : lo_m + 16, lo_n : lo_n + 12]
        )

    def test_sigma_for_snr_scales(self):
        x = make_phantom(desk_spec())
        assert abs(sigma_for_snr(x, 10) / sigma_for_snr(x, 20) - 2.0) < 1e-12
