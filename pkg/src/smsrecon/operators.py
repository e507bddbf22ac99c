"""Multi-coil SMS encoding: slice stacks, CAIPI FOV shifts, sampling masks.

Conventions used throughout the package:

- image grids are (M, N): M rows along readout, N columns along phase-encode
- k-space uses the centered, orthonormal (unitary) 2-D DFT, so the encoding
  operator norm is controlled by the coil-sensitivity norms
- a slab of S simultaneously excited slices is a single (S*M, N) complex
  array, slices stacked along the readout axis; row block [i*M, (i+1)*M)
  is slice i
- the per-slice CAIPI FOV shift acts along phase-encode and is applied to
  the coil-weighted slice image inside the forward operator, so slice
  stacks handled by callers are always in unshifted (anatomical)
  coordinates

All functions here are pure; none mutate their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def fft2c(img: np.ndarray) -> np.ndarray:
    """Centered orthonormal 2-D FFT over the last two axes."""
    shifted = np.fft.ifftshift(img, axes=(-2, -1))
    return np.fft.fftshift(np.fft.fft2(shifted, norm="ortho"), axes=(-2, -1))


def ifft2c(ksp: np.ndarray) -> np.ndarray:
    """Inverse of :func:`fft2c`."""
    shifted = np.fft.ifftshift(ksp, axes=(-2, -1))
    return np.fft.fftshift(np.fft.ifft2(shifted, norm="ortho"), axes=(-2, -1))


def apply_fov_shift(img: np.ndarray, shift_fraction: float, inverse: bool = False) -> np.ndarray:
    """Circularly shift image content along phase-encode by a fraction of the FOV.

    Parameters
    ----------
    img : array
        Complex image(s), phase-encode along the last axis.
    shift_fraction : float
        Shift as a fraction of the phase-encode FOV, |shift_fraction| < 1.
        Content at index n moves to index n + shift_fraction * N.
    inverse : bool
        Exactly undo the shift instead of applying it.

    Integer-pixel shifts are index rolls; fractional shifts use the Fourier
    shift theorem (a linear phase along the phase-encode frequency axis).
    Either way the operation is unitary and ``inverse=True`` composes to the
    identity up to float rounding.
    """
    if not abs(shift_fraction) < 1:
        raise ValueError(f"|shift_fraction| must be < 1, got {shift_fraction}")
    n = img.shape[-1]
    pixels = shift_fraction * n
    if inverse:
        pixels = -pixels
    if pixels == 0:
        return img.copy()
    if float(pixels).is_integer():
        return np.roll(img, int(pixels), axis=-1)
    freqs = np.fft.fftfreq(n)
    phase = np.exp(-2j * np.pi * freqs * pixels)
    return np.fft.ifft(np.fft.fft(img, axis=-1) * phase, axis=-1)


def fov_shift_phase(grid_n: int, shift_fraction: float) -> np.ndarray:
    """Linear phase along centered phase-encode frequencies equivalent to
    :func:`apply_fov_shift` before a centered FFT.

    Multiplying centered k-space (last axis) by the returned length-N vector
    equals shifting the underlying image by ``shift_fraction`` of the FOV.
    """
    freqs = (np.arange(grid_n) - grid_n // 2) / grid_n
    return np.exp(-2j * np.pi * freqs * (shift_fraction * grid_n))


def default_caipi_shifts(num_slices: int) -> tuple[float, ...]:
    """Standard blipped-CAIPI schedule: slice i shifted by (i mod S) * FOV/S."""
    return tuple((i % num_slices) / num_slices for i in range(num_slices))


@dataclass(frozen=True)
class SamplingMask:
    """In-plane k-space sampling pattern, shared across coils.

    ``kept`` is a boolean (M, N) grid; ``acceleration`` records the nominal
    in-plane undersampling factor R.
    """

    kept: np.ndarray
    acceleration: float = 1.0

    def __post_init__(self):
        kept = np.asarray(self.kept, dtype=bool)
        if kept.ndim != 2:
            raise ValueError(f"mask must be 2-D (M, N), got shape {kept.shape}")
        if not kept.any():
            raise ValueError("mask keeps no samples")
        object.__setattr__(self, "kept", kept)

    @property
    def grid(self) -> tuple[int, int]:
        return self.kept.shape

    @property
    def num_kept(self) -> int:
        return int(self.kept.sum())

    def apply(self, ksp: np.ndarray) -> np.ndarray:
        """Zero out unacquired locations (broadcasts over leading axes)."""
        return np.where(self.kept, ksp, 0)


def uniform_mask(grid: tuple[int, int], r: int, acs_lines: int = 0) -> SamplingMask:
    """Uniform R-fold phase-encode line skipping plus an optional fully
    sampled center block of ``acs_lines`` lines."""
    m, n = grid
    if r < 1 or r > n:
        raise ValueError(f"acceleration {r} invalid for {n} phase-encode lines")
    kept_lines = np.zeros(n, dtype=bool)
    kept_lines[::r] = True
    if acs_lines:
        lo = n // 2 - acs_lines // 2
        kept_lines[lo : lo + acs_lines] = True
    kept = np.broadcast_to(kept_lines, (m, n)).copy()
    return SamplingMask(kept=kept, acceleration=float(r))


def full_mask(grid: tuple[int, int]) -> SamplingMask:
    return SamplingMask(kept=np.ones(grid, dtype=bool), acceleration=1.0)


def acs_block_mask(grid: tuple[int, int], acs_lines: int) -> np.ndarray:
    """Boolean (M, N) grid marking the fully sampled calibration lines."""
    m, n = grid
    block = np.zeros((m, n), dtype=bool)
    lo = n // 2 - acs_lines // 2
    block[:, lo : lo + acs_lines] = True
    return block


@dataclass(frozen=True)
class KSpaceVolume:
    """Multi-coil complex k-space samples for one SMS slab, [coil, ky, kx]."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"k-space must be (coils, M, N), got shape {data.shape}")
        if not np.iscomplexobj(data):
            data = data.astype(np.complex128)
        object.__setattr__(self, "data", data)

    @property
    def num_coils(self) -> int:
        return self.data.shape[0]

    @property
    def grid(self) -> tuple[int, int]:
        return self.data.shape[1:]


@dataclass(frozen=True)
class SliceStackImage:
    """S simultaneously excited slices concatenated along readout: (S*M, N)."""

    data: np.ndarray
    num_slices: int

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise ValueError(f"slice stack must be 2-D (S*M, N), got shape {data.shape}")
        if self.num_slices < 1:
            raise ValueError("num_slices must be >= 1")
        if data.shape[0] % self.num_slices:
            raise ValueError(
                f"stack height {data.shape[0]} not divisible by num_slices {self.num_slices}"
            )
        if not np.iscomplexobj(data):
            data = data.astype(np.complex128)
        object.__setattr__(self, "data", data)

    @property
    def slice_extent(self) -> int:
        return self.data.shape[0] // self.num_slices

    @property
    def grid(self) -> tuple[int, int]:
        return (self.slice_extent, self.data.shape[1])


def split_stack(x: SliceStackImage) -> list[np.ndarray]:
    """Slice stack -> list of S (M, N) images. Inverse of :func:`concat_slices`."""
    m = x.slice_extent
    return [x.data[i * m : (i + 1) * m].copy() for i in range(x.num_slices)]


def concat_slices(slices: list[np.ndarray]) -> SliceStackImage:
    """List of S (M, N) images -> slice stack. Round trip with split is bit-exact."""
    if not slices:
        raise ValueError("need at least one slice")
    shapes = {s.shape for s in slices}
    if len(shapes) != 1:
        raise ValueError(f"inconsistent slice shapes: {sorted(shapes)}")
    return SliceStackImage(data=np.concatenate(slices, axis=0), num_slices=len(slices))


@dataclass(frozen=True)
class CoilSensitivities:
    """Complex coil maps [slice, coil, M, N], sum-of-squares normalized."""

    maps: np.ndarray

    def __post_init__(self):
        maps = np.asarray(self.maps)
        if maps.ndim != 4:
            raise ValueError(f"sensitivities must be (S, C, M, N), got shape {maps.shape}")
        if not np.iscomplexobj(maps):
            maps = maps.astype(np.complex128)
        object.__setattr__(self, "maps", maps)

    @property
    def num_slices(self) -> int:
        return self.maps.shape[0]

    @property
    def num_coils(self) -> int:
        return self.maps.shape[1]

    @property
    def grid(self) -> tuple[int, int]:
        return self.maps.shape[2:]


@dataclass(frozen=True)
class SmsEncodingOperator:
    """The SMS multi-coil encoding operator and its adjoint.

    Forward, per slice i: coil-weight by ``sens``, CAIPI-shift along
    phase-encode by ``fov_shifts[i]``, centered unitary 2-D FFT; the coil
    k-spaces are summed over slices and unacquired locations zeroed.
    """

    sens: CoilSensitivities
    mask: SamplingMask
    fov_shifts: tuple[float, ...] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.fov_shifts is None:
            object.__setattr__(self, "fov_shifts", default_caipi_shifts(self.sens.num_slices))
        else:
            object.__setattr__(self, "fov_shifts", tuple(float(s) for s in self.fov_shifts))
        if len(self.fov_shifts) != self.sens.num_slices:
            raise ValueError(
                f"{len(self.fov_shifts)} FOV shifts for {self.sens.num_slices} slices"
            )
        if self.sens.num_slices < 1:
            raise ValueError("operator needs at least one slice")
        if self.sens.grid != self.mask.grid:
            raise ValueError(
                f"sensitivity grid {self.sens.grid} != mask grid {self.mask.grid}"
            )

    @property
    def num_slices(self) -> int:
        return self.sens.num_slices

    @property
    def num_coils(self) -> int:
        return self.sens.num_coils

    @property
    def grid(self) -> tuple[int, int]:
        return self.sens.grid

    def forward(self, x: SliceStackImage) -> KSpaceVolume:
        return forward_sms(x, self)

    def adjoint(self, y: KSpaceVolume) -> SliceStackImage:
        return adjoint_sms(y, self)

    def with_mask(self, mask: SamplingMask) -> "SmsEncodingOperator":
        """Same geometry, different sampling pattern (used for loss masks)."""
        return SmsEncodingOperator(sens=self.sens, mask=mask, fov_shifts=self.fov_shifts)


def forward_sms(x: SliceStackImage, e: SmsEncodingOperator) -> KSpaceVolume:
    """Apply the SMS encoding operator: collapsed, undersampled k-space.

    Returns the coil k-space sum over slices with non-acquired locations
    exactly zero.
    """
    if x.num_slices != e.num_slices:
        raise ValueError(f"stack has {x.num_slices} slices, operator {e.num_slices}")
    if x.grid != e.grid:
        raise ValueError(f"stack grid {x.grid} != operator grid {e.grid}")
    m, n = e.grid
    imgs = x.data.reshape(e.num_slices, m, n)
    ksp = np.zeros((e.num_coils, m, n), dtype=np.complex128)
    for i in range(e.num_slices):
        coil_imgs = e.sens.maps[i] * imgs[i]
        coil_imgs = apply_fov_shift(coil_imgs, e.fov_shifts[i])
        ksp += fft2c(coil_imgs)
    return KSpaceVolume(data=np.where(e.mask.kept, ksp, 0))


def adjoint_sms(y: KSpaceVolume, e: SmsEncodingOperator) -> SliceStackImage:
    """Exact adjoint of :func:`forward_sms` (conjugate steps in reverse)."""
    if y.num_coils != e.num_coils:
        raise ValueError(f"k-space has {y.num_coils} coils, operator {e.num_coils}")
    if y.grid != e.grid:
        raise ValueError(f"k-space grid {y.grid} != operator grid {e.grid}")
    masked = np.where(e.mask.kept, y.data, 0)
    coil_imgs = ifft2c(masked)
    slices = []
    for i in range(e.num_slices):
        unshifted = apply_fov_shift(coil_imgs, e.fov_shifts[i], inverse=True)
        slices.append(np.sum(np.conj(e.sens.maps[i]) * unshifted, axis=0))
    return concat_slices(slices)
