"""fMRI analysis chain: scaling, nuisance projection, alignment, phase,
coherence, tSNR."""

import numpy as np
import pytest

from smsrecon.analysis import (
    CoherenceConfig,
    VoxelTimeSeries,
    align_runs,
    analyze_run_pair,
    coherence_between_runs,
    coherence_null_tail,
    legendre_design,
    percent_change,
    project_out_nuisance,
    scale_to_mean100,
    task_phase_amplitude,
    threshold_phase_map,
    tsnr,
)
from smsrecon.phantom import make_phantom, make_retinotopy_activation, random_phantom_spec, simulate_timeseries

TR = 1.0
PERIOD = 32.0


def series_of(values, run="ccw"):
    return VoxelTimeSeries(values=np.atleast_2d(values), tr=TR, run=run)


class TestScaling:
    def test_constant_series_becomes_100(self):
        s, excluded = scale_to_mean100(series_of(np.full((3, 16), 7.0)))
        assert np.allclose(s.values, 100.0)
        assert not excluded.any()

    def test_mean_after_scaling(self):
        rng = np.random.default_rng(0)
        s, _ = scale_to_mean100(series_of(rng.uniform(1, 2, size=(10, 64))))
        assert np.abs(s.values.mean(axis=1) - 100.0).max() < 1e-10

    def test_zero_voxel_excluded(self):
        vals = np.ones((2, 8))
        vals[1] = 0.0
        s, excluded = scale_to_mean100(series_of(vals))
        assert list(excluded) == [False, True]
        assert np.all(s.values[1] == 0)


class TestNuisance:
    def test_cubic_trend_removed(self):
        t = np.linspace(-1, 1, 64)
        trend = 3.0 + 2.0 * t - 1.5 * t**2 + 0.7 * t**3
        resid, _ = project_out_nuisance(series_of(trend), order=3)
        assert np.abs(resid.values).max() < 1e-8

    def test_task_sinusoid_preserved_with_protection(self):
        # the chain orthogonalizes the polynomials against the task pair, so
        # a pure task-frequency sinusoid passes through with no loss
        t = np.arange(128) * TR
        sinusoid = np.cos(2 * np.pi * t / PERIOD - 0.8)
        resid, _ = project_out_nuisance(series_of(sinusoid), order=3, protect_period=PERIOD)
        amp, phase = task_phase_amplitude(resid, PERIOD)
        assert abs(amp[0] - 1.0) < 1e-10
        assert abs(phase[0] - 0.8) < 1e-10

    def test_unprotected_cubic_fit_absorbs_task_amplitude(self):
        # measured: an unprotected order-3 fit soaks up ~6.8% of a 4-cycle
        # sinusoid and biases its phase, which is why the chain protects the
        # task frequency
        t = np.arange(128) * TR
        sinusoid = np.cos(2 * np.pi * t / PERIOD - 0.8)
        resid, _ = project_out_nuisance(series_of(sinusoid), order=3)
        amp, _ = task_phase_amplitude(resid, PERIOD)
        assert 0.05 < 1.0 - amp[0] < 0.09

    def test_projection_idempotent(self):
        rng = np.random.default_rng(1)
        s = series_of(rng.standard_normal((5, 96)))
        once, _ = project_out_nuisance(s, order=3)
        twice, _ = project_out_nuisance(once, order=3)
        assert np.abs(twice.values - once.values).max() < 1e-10

    def test_extra_regressors_removed(self):
        rng = np.random.default_rng(2)
        motion = rng.standard_normal((64, 2))
        s = series_of(motion @ np.array([1.5, -2.0]))
        resid, _ = project_out_nuisance(s, order=0, extra_regressors=motion)
        assert np.abs(resid.values).max() < 1e-8

    def test_spectral_quantities_invariant_to_nuisance_components(self):
        rng = np.random.default_rng(3)
        base = rng.standard_normal((4, 128))
        design = legendre_design(128, 3)
        contaminated = base + rng.standard_normal((4, 4)) @ design.T * 5.0
        r1, _ = project_out_nuisance(series_of(base), order=3)
        r2, _ = project_out_nuisance(series_of(contaminated), order=3)
        a1, p1 = task_phase_amplitude(r1, PERIOD)
        a2, p2 = task_phase_amplitude(r2, PERIOD)
        assert np.abs(a1 - a2).max() < 1e-10
        assert np.abs(p1 - p2).max() < 1e-10
        c1 = coherence_between_runs(r1, r1.with_values(base[::-1].copy()), PERIOD)
        c2 = coherence_between_runs(r2, r2.with_values(base[::-1].copy()), PERIOD)
        assert np.abs(c1 - c2).max() < 1e-10


class TestAlignment:
    def test_double_reversal_is_identity(self):
        rng = np.random.default_rng(4)
        s = series_of(rng.standard_normal((3, 32)), run="cw")
        back = align_runs(align_runs(s, 0), 0)
        assert np.array_equal(back.values, s.values)

    def test_nonzero_shift_rolls(self):
        s = series_of(np.arange(8.0))
        shifted = align_runs(s, hemodynamic_shift=2)
        assert np.array_equal(shifted.values[0], np.roll(s.values[0][::-1], 2))

    def test_simulated_cw_aligns_to_ccw(self):
        spec = random_phantom_spec((24, 24), 1, 2, seed=5)
        phantom = make_phantom(spec)
        act = make_retinotopy_activation((24, 24), 1, amplitude=0.08, num_frames=64)
        truth = simulate_timeseries(phantom, act)
        ccw = np.abs(truth["ccw"]).reshape(64, -1).T
        cw = np.abs(truth["cw"]).reshape(64, -1).T
        aligned = align_runs(VoxelTimeSeries(values=cw, tr=TR, run="cw"), 0)
        active = act.mask.reshape(-1) & (np.abs(phantom.data).reshape(-1) > 0.1)
        for v in np.flatnonzero(active)[::7]:
            r = np.corrcoef(aligned.values[v], ccw[v])[0, 1]
            assert r > 0.99

    def test_aligned_mean_phase_matches_ccw_only_phase(self):
        spec = random_phantom_spec((24, 24), 1, 2, seed=6)
        phantom = make_phantom(spec)
        act = make_retinotopy_activation((24, 24), 1, amplitude=0.08, num_frames=64)
        truth = simulate_timeseries(phantom, act)
        active = act.mask.reshape(-1) & (np.abs(phantom.data).reshape(-1) > 0.1)
        ccw = VoxelTimeSeries(values=np.abs(truth["ccw"]).reshape(64, -1).T, tr=TR)
        cw = VoxelTimeSeries(values=np.abs(truth["cw"]).reshape(64, -1).T, tr=TR)
        aligned = align_runs(cw, 0)
        mean = ccw.with_values(0.5 * (ccw.values + aligned.values))
        _, phase_mean = task_phase_amplitude(mean, PERIOD)
        _, phase_ccw = task_phase_amplitude(ccw, PERIOD)
        dphi = np.angle(np.exp(1j * (phase_mean - phase_ccw)))
        assert np.abs(dphi[active]).max() < 0.05


class TestPhaseAmplitude:
    def test_pure_cosine(self):
        t = np.arange(64) * TR
        amp, phase = task_phase_amplitude(series_of(np.cos(2 * np.pi * t / PERIOD)), PERIOD)
        assert abs(amp[0] - 1.0) < 1e-12
        assert abs(phase[0]) < 1e-12

    def test_phase_offset_recovered_with_sign(self):
        t = np.arange(64) * TR
        for phi0 in [0.5, -1.2, 2.9]:
            _, phase = task_phase_amplitude(
                series_of(np.cos(2 * np.pi * t / PERIOD - phi0)), PERIOD
            )
            assert abs(np.angle(np.exp(1j * (phase[0] - phi0)))) < 1e-12

    def test_incommensurate_period_rejected(self):
        with pytest.raises(ValueError):
            task_phase_amplitude(series_of(np.zeros(100)), PERIOD)

    def test_amplitude_recovery_under_noise(self):
        # 5% activation on a mean-100 voxel at frame noise sigma=5 (image
        # SNR ~ 20); mean recovered amplitude over many voxels within 2%
        rng = np.random.default_rng(7)
        t = np.arange(128) * TR
        clean = 100.0 * (1 + 0.05 * np.cos(2 * np.pi * t / PERIOD - 1.0))
        vals = clean + 5.0 * rng.standard_normal((400, 128))
        scaled, _ = scale_to_mean100(series_of(vals))
        resid, _ = project_out_nuisance(scaled, order=3, protect_period=PERIOD)
        amp, _ = task_phase_amplitude(resid, PERIOD)
        assert abs(amp.mean() - 5.0) / 5.0 < 0.02


class TestCoherence:
    def test_identical_runs_give_exactly_one(self):
        rng = np.random.default_rng(8)
        vals = rng.standard_normal((6, 128))
        a = series_of(vals)
        b = series_of(vals.copy())
        coh = coherence_between_runs(a, b, PERIOD)
        assert np.all(coh == 1.0)

    def test_null_floor_matches_analytic_for_disjoint_segments(self):
        # non-overlapping segments are independent, where the closed-form
        # null E[C] = 1/L and P(C > c) = (1-c)^(L-1) is exact
        rng = np.random.default_rng(9)
        n = 40_000
        cfg = CoherenceConfig(segment_periods=1, overlap_fraction=0.0)
        coh = coherence_between_runs(
            series_of(rng.standard_normal((n, 128))),
            series_of(rng.standard_normal((n, 128))),
            PERIOD,
            cfg,
        )
        num_segments = 4
        se_mean = np.sqrt(coh.var() / n)
        assert abs(coh.mean() - 1 / num_segments) < 3 * se_mean
        for thr in [0.4, 0.55, 0.7]:
            expected = coherence_null_tail(num_segments, thr)
            observed = (coh > thr).mean()
            se = np.sqrt(expected * (1 - expected) / n)
            assert abs(observed - expected) < 4 * se

    def test_scale_invariance(self):
        rng = np.random.default_rng(10)
        a = series_of(rng.standard_normal((5, 128)))
        b = series_of(rng.standard_normal((5, 128)))
        base = coherence_between_runs(a, b, PERIOD)
        scaled = coherence_between_runs(
            a.with_values(3.7 * a.values), b.with_values(0.2 * b.values), PERIOD
        )
        assert np.abs(base - scaled).max() < 1e-12

    def test_always_in_unit_interval(self):
        rng = np.random.default_rng(11)
        for seed in range(5):
            vals = np.random.default_rng(seed).standard_normal((20, 128))
            coh = coherence_between_runs(
                series_of(vals), series_of(rng.standard_normal((20, 128))), PERIOD
            )
            assert np.all(coh >= 0) and np.all(coh <= 1)

    def test_default_config_false_positive_rate_below_1pct(self):
        # full chain on pure-noise voxels at 128 frames, threshold 0.55
        rng = np.random.default_rng(12)
        n = 20_000
        ccw = series_of(100 + 5 * rng.standard_normal((n, 128)))
        cw = series_of(100 + 5 * rng.standard_normal((n, 128)), run="cw")
        result = analyze_run_pair(ccw, cw, PERIOD)
        fp = (result.coherence >= 0.55).mean()
        assert fp < 0.01


class TestTsnr:
    def test_zero_residual_gives_inf_sentinel(self):
        processed = series_of(np.full((2, 16), 100.0))
        residual = series_of(np.zeros((2, 16)))
        out = tsnr(processed, residual)
        assert np.all(np.isinf(out))

    def test_doubling_noise_halves_tsnr(self):
        rng = np.random.default_rng(13)
        n = 2000
        noise = rng.standard_normal((n, 128))
        t1 = tsnr(series_of(np.full((n, 128), 100.0)), series_of(2.0 * noise))
        t2 = tsnr(series_of(np.full((n, 128), 100.0)), series_of(4.0 * noise))
        assert abs((t1 / t2).mean() - 2.0) < 0.02

    def test_percent_change(self):
        a = np.array([150.0, 50.0])
        b = np.array([100.0, 100.0])
        assert np.allclose(percent_change(a, b), [50.0, -50.0])
        assert np.isnan(percent_change(np.array([1.0]), np.array([0.0]))[0])


class TestPhaseMap:
    def test_threshold_zero_retains_all(self):
        rng = np.random.default_rng(14)
        pm = threshold_phase_map(rng.uniform(-np.pi, np.pi, 50), rng.uniform(0, 1, 50), 0.0)
        assert pm.num_surviving == 50

    def test_threshold_above_one_retains_none(self):
        rng = np.random.default_rng(15)
        pm = threshold_phase_map(rng.uniform(-np.pi, np.pi, 50), rng.uniform(0, 1, 50), 1.0 + 1e-9)
        assert pm.num_surviving == 0
        assert np.all(np.isnan(pm.phase))

    def test_noiseless_chain_recovers_activation_phase(self):
        # ground-truth magnitudes through the full chain: phase map equals
        # the activation's phase assignment within 0.05 rad on active voxels
        spec = random_phantom_spec((24, 24), 1, 2, seed=16)
        phantom = make_phantom(spec)
        act = make_retinotopy_activation((24, 24), 1, amplitude=0.08, num_frames=128)
        truth = simulate_timeseries(phantom, act)
        ccw = VoxelTimeSeries(values=np.abs(truth["ccw"]).reshape(128, -1).T, tr=TR)
        cw = VoxelTimeSeries(values=np.abs(truth["cw"]).reshape(128, -1).T, tr=TR, run="cw")
        result = analyze_run_pair(ccw, cw, PERIOD)
        active = act.mask.reshape(-1) & (np.abs(phantom.data).reshape(-1) > 0.1)
        dphi = np.angle(np.exp(1j * (result.phase[active] - act.phase.reshape(-1)[active])))
        assert np.abs(dphi).max() < 0.05
        assert np.all(result.coherence[active] > 0.99)
        assert np.all(result.phase_map.surviving[active])
