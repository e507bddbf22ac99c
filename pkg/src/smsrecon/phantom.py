"""Synthetic multi-slice fMRI slabs: ellipse phantoms, coil maps, task activation.

Stands in for the scanner: produces ground-truth slice stacks with a
sinusoidal task response at the wedge-rotation frequency, smooth complex
coil sensitivities, and prospectively undersampled SMS k-space with complex
Gaussian noise. Everything is deterministic given the seeds; per-frame noise
streams are derived from (seed, run, frame) so frames can be generated in
any order or in parallel.

Normalized image coordinates: u along readout rows, v along phase-encode
columns, both spanning about [-1, 1] at the pixel centers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .operators import (
    CoilSensitivities,
    KSpaceVolume,
    SamplingMask,
    SliceStackImage,
    fft2c,
    fov_shift_phase,
)

RUNS = ("ccw", "cw")


def _grid_coords(grid):
    m, n = grid
    u = (np.arange(m) - (m - 1) / 2) / (m / 2)
    v = (np.arange(n) - (n - 1) / 2) / (n / 2)
    return np.meshgrid(u, v, indexing="ij")


@dataclass(frozen=True)
class Ellipse:
    """Ellipse in normalized coordinates; intensity adds to the magnitude."""

    center: tuple[float, float]
    axes: tuple[float, float]
    angle: float = 0.0
    intensity: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.intensity <= 1.0:
            raise ValueError(f"intensity must be in [0, 1], got {self.intensity}")
        if min(self.axes) <= 0:
            raise ValueError(f"ellipse axes must be positive, got {self.axes}")

    def indicator(self, grid) -> np.ndarray:
        uu, vv = _grid_coords(grid)
        du, dv = uu - self.center[0], vv - self.center[1]
        c, s = np.cos(self.angle), np.sin(self.angle)
        ur = c * du + s * dv
        vr = -s * du + c * dv
        return (ur / self.axes[0]) ** 2 + (vr / self.axes[1]) ** 2 <= 1.0


@dataclass(frozen=True)
class PhantomSpec:
    """Piecewise-smooth slab description: per-slice ellipse lists + seed."""

    grid: tuple[int, int]
    num_slices: int
    num_coils: int
    ellipses: tuple[tuple[Ellipse, ...], ...]
    seed: int = 0

    def __post_init__(self):
        if self.num_slices < 1 or self.num_coils < 1:
            raise ValueError("need at least one slice and one coil")
        if len(self.ellipses) != self.num_slices:
            raise ValueError(
                f"{len(self.ellipses)} ellipse lists for {self.num_slices} slices"
            )


def make_phantom(spec: PhantomSpec) -> SliceStackImage:
    """Ground-truth complex slab: ellipse magnitudes, smooth polynomial phase.

    Deterministic given ``spec.seed``; an empty ellipse list gives a zero
    slice.
    """
    m, n = spec.grid
    uu, vv = _grid_coords(spec.grid)
    slices = []
    for i in range(spec.num_slices):
        mag = np.zeros((m, n))
        for ell in spec.ellipses[i]:
            mag += ell.intensity * ell.indicator(spec.grid)
        rng = np.random.default_rng((spec.seed, 101, i))
        c = rng.uniform(-0.5, 0.5, size=5)
        phase = c[0] * uu + c[1] * vv + c[2] * uu**2 + c[3] * vv**2 + c[4] * uu * vv
        slices.append(mag * np.exp(1j * phase))
    return SliceStackImage(data=np.concatenate(slices, axis=0), num_slices=spec.num_slices)


def random_phantom_spec(
    grid: tuple[int, int],
    num_slices: int,
    num_coils: int,
    seed: int,
    num_features: int = 4,
) -> PhantomSpec:
    """Randomized head-like phantom: one big base ellipse per slice plus small
    interior features; feature intensities sized so the total stays <= 1."""
    rng = np.random.default_rng((seed, 42))
    per_slice = []
    for _ in range(num_slices):
        base = Ellipse(
            center=(rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05)),
            axes=(rng.uniform(0.72, 0.85), rng.uniform(0.62, 0.78)),
            angle=rng.uniform(-0.2, 0.2),
            intensity=rng.uniform(0.55, 0.65),
        )
        features = [
            Ellipse(
                center=(rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4)),
                axes=(rng.uniform(0.06, 0.22), rng.uniform(0.06, 0.22)),
                angle=rng.uniform(0, np.pi),
                intensity=rng.uniform(0.05, 0.17),
            )
            for _ in range(num_features)
        ]
        per_slice.append(tuple([base] + features))
    return PhantomSpec(
        grid=grid,
        num_slices=num_slices,
        num_coils=num_coils,
        ellipses=tuple(per_slice),
        seed=seed,
    )


def make_sensitivities(spec: PhantomSpec) -> CoilSensitivities:
    """Smooth complex coil profiles: Gaussian lobes around the FOV with mild
    per-slice jitter, sum-of-squares normalized to 1 at every pixel."""
    m, n = spec.grid
    uu, vv = _grid_coords(spec.grid)
    maps = np.zeros((spec.num_slices, spec.num_coils, m, n), dtype=np.complex128)
    for i in range(spec.num_slices):
        rng = np.random.default_rng((spec.seed, 17, i))
        jitter = rng.uniform(-0.1, 0.1, size=spec.num_coils)
        phase_coef = rng.uniform(-0.4, 0.4, size=(spec.num_coils, 2))
        for c in range(spec.num_coils):
            ang = 2 * np.pi * c / spec.num_coils + jitter[c]
            cu, cv = 1.3 * np.cos(ang), 1.3 * np.sin(ang)
            lobe = np.exp(-((uu - cu) ** 2 + (vv - cv) ** 2) / (2 * 1.0**2))
            phase = phase_coef[c, 0] * uu + phase_coef[c, 1] * vv
            maps[i, c] = lobe * np.exp(1j * phase)
        sos = np.sqrt(np.sum(np.abs(maps[i]) ** 2, axis=0))
        maps[i] /= sos
    return CoilSensitivities(maps=maps)


@dataclass(frozen=True)
class ActivationSpec:
    """Sinusoidal task response at the wedge-rotation frequency.

    Active voxels (``mask``) oscillate as 1 + amplitude*cos(2*pi*t*TR/period
    - phase); ``phase`` encodes each voxel's preferred wedge angle, giving
    the ground-truth retinotopic phase map. The clockwise run is the exact
    time reversal of the counter-clockwise one, so reversing its frames
    aligns the two (alignment shift 0).
    """

    mask: np.ndarray
    phase: np.ndarray
    amplitude: float = 0.05
    task_period: float = 32.0
    repetition_time: float = 1.0
    num_frames: int = 128

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=bool)
        phase = np.asarray(self.phase, dtype=np.float64)
        if mask.shape != phase.shape:
            raise ValueError(f"mask shape {mask.shape} != phase shape {phase.shape}")
        # amplitude 0 is allowed as the degenerate no-activation case
        if not 0.0 <= self.amplitude < 0.2:
            raise ValueError(f"amplitude must be in [0, 0.2), got {self.amplitude}")
        frames_per_cycle = self.task_period / self.repetition_time
        if self.num_frames < 2 * frames_per_cycle:
            raise ValueError(
                f"{self.num_frames} frames < 2 task cycles ({2 * frames_per_cycle:.0f} frames)"
            )
        cycles = self.num_frames / frames_per_cycle
        if abs(cycles - round(cycles)) > 1e-9:
            raise ValueError("run length must hold a whole number of task cycles")
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "phase", phase)

    @property
    def task_frequency(self) -> float:
        return 1.0 / self.task_period

    def modulation(self, run: str, frame: int) -> np.ndarray:
        """Multiplicative activation field for one frame of one run."""
        if run not in RUNS:
            raise ValueError(f"run must be one of {RUNS}, got {run!r}")
        t = frame if run == "ccw" else self.num_frames - 1 - frame
        arg = 2 * np.pi * t * self.repetition_time / self.task_period - self.phase
        field_ = np.ones_like(self.phase)
        field_[self.mask] += self.amplitude * np.cos(arg[self.mask])
        return field_


def make_retinotopy_activation(
    grid: tuple[int, int],
    num_slices: int,
    amplitude: float = 0.05,
    num_frames: int = 128,
    task_period: float = 32.0,
    repetition_time: float = 1.0,
    inner_radius: float = 0.15,
    outer_radius: float = 0.62,
) -> ActivationSpec:
    """Annulus of active voxels whose preferred phase is their polar angle,
    mimicking a rotating-wedge retinotopy response, replicated per slice."""
    uu, vv = _grid_coords(grid)
    radius = np.hypot(uu, vv)
    ring = (radius >= inner_radius) & (radius <= outer_radius)
    angle = np.arctan2(vv, uu)
    mask = np.tile(ring, (num_slices, 1))
    phase = np.tile(angle, (num_slices, 1))
    return ActivationSpec(
        mask=mask,
        phase=phase,
        amplitude=amplitude,
        task_period=task_period,
        repetition_time=repetition_time,
        num_frames=num_frames,
    )


@dataclass(frozen=True)
class NoiseModel:
    """Complex Gaussian k-space noise, i.i.d. across samples and coils.

    ``sigma`` is the standard deviation of each complex sample
    (E|n|^2 = sigma^2; real and imaginary parts each sigma/sqrt(2)).
    """

    sigma: float
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")

    def sample(self, shape, stream: tuple[int, ...] = ()) -> np.ndarray:
        rng = np.random.default_rng((self.seed, 977) + tuple(stream))
        scale = self.sigma / np.sqrt(2)
        return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def sigma_for_snr(phantom: SliceStackImage, snr: float) -> float:
    """Noise sigma giving roughly the requested image-domain SNR over the
    phantom support (unitary FFT keeps k-space and image noise levels equal)."""
    mag = np.abs(phantom.data)
    support = mag > 0.05 * mag.max()
    return float(mag[support].mean() / snr)


def frame_stack(
    phantom: SliceStackImage, activation: ActivationSpec, run: str, frame: int
) -> SliceStackImage:
    """Ground-truth slab for one frame of one run."""
    return SliceStackImage(
        data=phantom.data * activation.modulation(run, frame),
        num_slices=phantom.num_slices,
    )


def simulate_timeseries(
    phantom: SliceStackImage, activation: ActivationSpec
) -> dict[str, np.ndarray]:
    """Noiseless ground-truth series for both runs: run -> (frames, S*M, N)."""
    out = {}
    for run in RUNS:
        frames = [frame_stack(phantom, activation, run, t).data for t in range(activation.num_frames)]
        out[run] = np.stack(frames, axis=0)
    return out


def single_band_kspace(stack: SliceStackImage, sens: CoilSensitivities) -> np.ndarray:
    """Fully sampled per-slice multi-coil k-space (S, C, M, N), no CAIPI shift."""
    if sens.num_slices != stack.num_slices or sens.grid != stack.grid:
        raise ValueError("sensitivity geometry does not match the stack")
    m, n = stack.grid
    imgs = stack.data.reshape(stack.num_slices, 1, m, n)
    return fft2c(sens.maps * imgs)


def collapse_sms(single_band: np.ndarray, fov_shifts) -> np.ndarray:
    """Sum per-slice k-spaces with their CAIPI phase ramps: the fully sampled
    collapsed slab (C, M, N). Matches forward_sms with a full mask."""
    s, _, _, n = single_band.shape
    if len(fov_shifts) != s:
        raise ValueError(f"{len(fov_shifts)} shifts for {s} slices")
    ksp = np.zeros(single_band.shape[1:], dtype=np.complex128)
    for i in range(s):
        ksp += single_band[i] * fov_shift_phase(n, fov_shifts[i])
    return ksp


@dataclass(frozen=True)
class SampledSlab:
    """One prospectively sampled SMS acquisition plus its calibration data.

    ``full_measured`` is the same noisy collapsed k-space before masking,
    i.e. what a fully sampled scan of the identical object and noise
    realization would measure: ``acquired`` equals it on the kept samples.
    It is the reference a supervised trainer can honestly use.
    """

    acquired: KSpaceVolume
    full_measured: np.ndarray  # (C, M, N) collapsed, noisy, unmasked
    calibration: np.ndarray  # per-slice single-band center block (S, C, cal_m, cal_n)
    calibration_offset: tuple[int, int]  # top-left corner of the block in the grid


def sample_kspace(
    single_band: np.ndarray,
    mask: SamplingMask,
    fov_shifts,
    noise: NoiseModel | None = None,
    stream: tuple[int, ...] = (),
    calib_shape: tuple[int, int] | None = None,
) -> SampledSlab:
    """Collapse S slices with their FOV shifts, apply the sampling pattern,
    and add acquisition noise on the kept samples.

    Also crops the per-slice single-band center block used for split
    slice-GRAPPA calibration (its own noise stream, mimicking a separate
    calibration scan). Unacquired locations of the slab are exactly zero.
    """
    s, c, m, n = single_band.shape
    if mask.grid != (m, n):
        raise ValueError(f"mask grid {mask.grid} != k-space grid {(m, n)}")
    full = collapse_sms(single_band, fov_shifts)
    if noise is not None:
        full = full + noise.sample(full.shape, stream=tuple(stream) + (0,))
    acquired = KSpaceVolume(data=np.where(mask.kept, full, 0))

    if calib_shape is None:
        calib_shape = (min(32, m), min(24, n))
    cal_m, cal_n = calib_shape
    lo_m, lo_n = m // 2 - cal_m // 2, n // 2 - cal_n // 2
    calib = single_band[:, :, lo_m : lo_m + cal_m, lo_n : lo_n + cal_n].copy()
    if noise is not None:
        calib = calib + noise.sample(calib.shape, stream=tuple(stream) + (1,))
    return SampledSlab(
        acquired=acquired,
        full_measured=full,
        calibration=calib,
        calibration_offset=(lo_m, lo_n),
    )
