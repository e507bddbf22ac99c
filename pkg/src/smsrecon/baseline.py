"""Conventional reconstructions: split slice-GRAPPA and CG-SENSE.

Split slice-GRAPPA fits per-slice k-space convolution kernels whose sources
are the CAIPI-collapsed calibration data of each individual slice and whose
targets are that slice's own samples (and zero for every other slice), which
penalizes inter-slice leakage in the least-squares fit. Reconstruction then
runs slice separation on the acquired phase-encode lattice, fills the
skipped in-plane lines with ordinary GRAPPA kernels, inverse transforms,
removes the CAIPI shifts and coil-combines with the sensitivity maps.

CG-SENSE solves the unregularized normal equations of the SMS encoding
operator with conjugate gradients.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .operators import (
    KSpaceVolume,
    SliceStackImage,
    SmsEncodingOperator,
    adjoint_sms,
    apply_fov_shift,
    concat_slices,
    forward_sms,
    fov_shift_phase,
    ifft2c,
)


def _slice_tap_offsets(r: int, kernel_size: tuple[int, int]):
    """Source taps for slice separation: target at (0, 0), phase-encode taps
    spaced R apart so every source lands on an acquired lattice line."""
    n_ro, n_pe = kernel_size
    ro = np.arange(n_ro) - n_ro // 2
    pe = r * (np.arange(n_pe) - n_pe // 2)
    return ro, pe

def _inplane_tap_offsets(r: int, gap: int, kernel_size: tuple[int, int]):
    """Source taps for filling the line at +gap from the lattice: an even
    number of acquired lines bracketing the target."""
    n_ro = kernel_size[0]
    n_pe = kernel_size[1] - (kernel_size[1] % 2)  # even count brackets the gap
    ro = np.arange(n_ro) - n_ro // 2
    pe = -gap + r * (np.arange(n_pe) - (n_pe - 1) // 2)
    return ro, pe


def _source_matrix(data: np.ndarray, ro_off, pe_off):
    """All valid target positions of ``data`` (C, M, N) -> (P, C*K) source
    matrix plus the (row, col) index arrays of the targets."""
    c, m, n = data.shape
    ro_lo, ro_hi = -int(ro_off.min()), m - int(ro_off.max())
    pe_lo, pe_hi = -int(pe_off.min()), n - int(pe_off.max())
    if ro_hi <= ro_lo or pe_hi <= pe_lo:
        raise ValueError(
            f"calibration block {(m, n)} smaller than kernel footprint "
            f"({ro_off.max() - ro_off.min() + 1} x {pe_off.max() - pe_off.min() + 1})"
        )
    rows = np.arange(ro_lo, ro_hi)
    cols = np.arange(pe_lo, pe_hi)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    cols_per_tap = []
    for dr in ro_off:
        for dc in pe_off:
            cols_per_tap.append(data[:, rr + dr, cc + dc].reshape(c, -1))
    # (P, C*K) with source coil varying slowest, taps fastest
    a = np.concatenate(cols_per_tap, axis=0)  # (C*K ordered tap-major per coil)
    # reorder: currently [tap, coil] blocks stacked as tap-major; rebuild coil-major
    k = len(ro_off) * len(pe_off)
    a = a.reshape(k, c, -1).transpose(1, 0, 2).reshape(c * k, -1)
    return a.T.copy(), rr, cc


def _fit_kernels(aha: np.ndarray, ahb: np.ndarray, tikhonov: float) -> np.ndarray:
    lam = tikhonov * float(np.linalg.eigvalsh(aha)[-1].real) if tikhonov else 0.0
    reg = aha + lam * np.eye(aha.shape[0])
    return np.linalg.solve(reg, ahb)


@dataclass(frozen=True)
class SgKernelSet:
    """Split slice-GRAPPA kernels plus the in-plane GRAPPA kernels.

    ``slice_kernels``: (S, C_out, C_in, n_ro, n_pe), phase-encode taps
    spaced R apart. ``inplane_kernels``: (S, R-1, C_out, C_in, n_ro, n_pe_in)
    or None when R == 1.
    """

    slice_kernels: np.ndarray
    inplane_kernels: np.ndarray | None
    r: int
    kernel_size: tuple[int, int]
    fov_shifts: tuple[float, ...]

    @property
    def num_slices(self) -> int:
        return self.slice_kernels.shape[0]

    @property
    def num_coils(self) -> int:
        return self.slice_kernels.shape[1]


def calibrate_split_sg(
    calibration: np.ndarray,
    r: int,
    kernel_size: tuple[int, int] = (5, 5),
    tikhonov: float = 1e-4,
    fov_shifts=None,
) -> SgKernelSet:
    """Fit split slice-GRAPPA kernels from per-slice calibration k-space.

    Parameters
    ----------
    calibration : array (S, C, cal_m, cal_n)
        Fully sampled single-band center blocks, one per slice, unshifted.
    r : int
        In-plane acceleration of the data the kernels will be applied to.
    kernel_size : (n_ro, n_pe)
        Tap counts along readout and phase-encode.
    tikhonov : float
        Regularization relative to the spectral norm of the calibration
        matrix (added to the normal equations as tikhonov * lambda_max * I).
    fov_shifts : per-slice CAIPI shift fractions; defaults to the blipped
        schedule used by the encoding operator.

    The fit stacks one source block per slice j (that slice's calibration
    with its CAIPI ramp applied) with targets equal to slice i's ramped
    samples when j == i and zero otherwise, so kernels both reconstruct
    their slice and suppress the others.
    """
    calibration = np.asarray(calibration)
    if calibration.ndim != 4:
        raise ValueError(f"calibration must be (S, C, m, n), got {calibration.shape}")
    s, c, cal_m, cal_n = calibration.shape
    if fov_shifts is None:
        from .operators import default_caipi_shifts

        fov_shifts = default_caipi_shifts(s)
    fov_shifts = tuple(float(f) for f in fov_shifts)

    # apply the CAIPI ramp so calibration lives in the collapsed-data frame
    cal_sh = np.array(
        [calibration[i] * fov_shift_phase(cal_n, fov_shifts[i]) for i in range(s)]
    )

    ro_off, pe_off = _slice_tap_offsets(r, kernel_size)
    k = len(ro_off) * len(pe_off)
    sources = []
    targets = []
    for j in range(s):
        a, rr, cc = _source_matrix(cal_sh[j], ro_off, pe_off)
        sources.append(a)
        targets.append(cal_sh[j][:, rr, cc].reshape(c, -1).T)

    slice_kernels = np.zeros((s, c, c, len(ro_off), len(pe_off)), dtype=np.complex128)
    aha = sum(a.conj().T @ a for a in sources)
    for i in range(s):
        ahb = sources[i].conj().T @ targets[i]
        kern = _fit_kernels(aha, ahb, tikhonov)  # (C*K, C)
        slice_kernels[i] = kern.reshape(c, k, c).transpose(2, 0, 1).reshape(
            c, c, len(ro_off), len(pe_off)
        )

    inplane = None
    if r > 1:
        kernels = []
        for gap in range(1, r):
            ro_in, pe_in = _inplane_tap_offsets(r, gap, kernel_size)
            k_in = len(ro_in) * len(pe_in)
            per_slice = []
            for i in range(s):
                a, rr, cc = _source_matrix(cal_sh[i], ro_in, pe_in)
                b = cal_sh[i][:, rr, cc].reshape(c, -1).T
                kern = _fit_kernels(a.conj().T @ a, a.conj().T @ b, tikhonov)
                per_slice.append(
                    kern.reshape(c, k_in, c).transpose(2, 0, 1).reshape(
                        c, c, len(ro_in), len(pe_in)
                    )
                )
            kernels.append(np.stack(per_slice))
        inplane = np.stack(kernels, axis=1)  # (S, R-1, C, C, n_ro, n_pe_in)

    return SgKernelSet(
        slice_kernels=slice_kernels,
        inplane_kernels=inplane,
        r=r,
        kernel_size=tuple(kernel_size),
        fov_shifts=fov_shifts,
    )


def _convolve_kernels(src: np.ndarray, kernels: np.ndarray, ro_off, pe_off) -> np.ndarray:
    """Apply (C_out, C_in, n_ro, n_pe) kernels to (C_in, M, N) k-space with
    zero padding at the boundaries."""
    c_in, m, n = src.shape
    pr = int(max(-ro_off.min(), ro_off.max(), 0))
    pc = int(max(-pe_off.min(), pe_off.max(), 0))
    padded = np.pad(src, ((0, 0), (pr, pr), (pc, pc)))
    out = np.zeros((kernels.shape[0], m, n), dtype=np.complex128)
    for a, dr in enumerate(ro_off):
        for b, dc in enumerate(pe_off):
            window = padded[:, pr + dr : pr + dr + m, pc + dc : pc + dc + n]
            out += np.einsum("oc,cmn->omn", kernels[:, :, a, b], window)
    return out


def _lattice_columns(mask_kept: np.ndarray, r: int) -> np.ndarray:
    """Columns of the uniform acquisition lattice (the residue class mod R
    with the most fully sampled columns; ACS lines add off-lattice extras)."""
    full_cols = np.flatnonzero(mask_kept.all(axis=0))
    if full_cols.size == 0:
        raise ValueError("mask has no fully sampled phase-encode lines")
    counts = [np.sum(full_cols % r == p) for p in range(r)]
    phase = int(np.argmax(counts))
    n = mask_kept.shape[1]
    return np.arange(phase, n, r)


def apply_split_sg(
    y: KSpaceVolume, kernels: SgKernelSet, e: SmsEncodingOperator
) -> SliceStackImage:
    """De-alias collapsed, in-plane-undersampled k-space into a slice stack.

    Slice separation runs on the acquired lattice, in-plane GRAPPA fills the
    skipped lines, then inverse FFT, CAIPI unshift and sensitivity-weighted
    coil combination. With S == 1 separation is the identity; with R == 1 no
    filling is needed, so at S=1, R=1 this equals the adjoint coil combine.
    """
    if kernels.num_coils != e.num_coils or kernels.num_slices != e.num_slices:
        raise ValueError("kernel set does not match the operator geometry")
    m, n = e.grid
    r = kernels.r
    lattice = _lattice_columns(e.mask.kept, r)
    on_lattice = np.zeros(n, dtype=bool)
    on_lattice[lattice] = True

    ro_off, pe_off = _slice_tap_offsets(r, kernels.kernel_size)
    slices = []
    for i in range(e.num_slices):
        if e.num_slices == 1:
            ksep = np.where(on_lattice, y.data, 0)
        else:
            ksep = _convolve_kernels(y.data, kernels.slice_kernels[i], ro_off, pe_off)
            ksep = np.where(on_lattice, ksep, 0)
        if r > 1:
            filled = np.array(ksep)
            for gap in range(1, r):
                ro_in, pe_in = _inplane_tap_offsets(r, gap, kernels.kernel_size)
                est = _convolve_kernels(ksep, kernels.inplane_kernels[i, gap - 1], ro_in, pe_in)
                target_cols = lattice + gap
                target_cols = target_cols[target_cols < n]
                filled[:, :, target_cols] = est[:, :, target_cols]
            ksep = filled
        img = ifft2c(ksep)
        img = apply_fov_shift(img, kernels.fov_shifts[i], inverse=True)
        slices.append(np.sum(np.conj(e.sens.maps[i]) * img, axis=0))
    return concat_slices(slices)


def sg_leakage(kernels: SgKernelSet, calibration: np.ndarray) -> np.ndarray:
    """Inter-slice leakage matrix L[i, j]: energy that slice j's (ramped)
    calibration data deposits in slice i's kernel output, relative to the
    energy it deposits in its own slice. Diagonal is 1 by construction."""
    s, _, _, cal_n = calibration.shape
    ro_off, pe_off = _slice_tap_offsets(kernels.r, kernels.kernel_size)
    energies = np.zeros((s, s))
    for j in range(s):
        src = calibration[j] * fov_shift_phase(cal_n, kernels.fov_shifts[j])
        for i in range(s):
            out = _convolve_kernels(src, kernels.slice_kernels[i], ro_off, pe_off)
            energies[i, j] = np.sum(np.abs(out) ** 2)
    return energies / np.diag(energies)[None, :]


@dataclass
class CgResult:
    image: SliceStackImage
    residual_norms: np.ndarray
    converged: bool
    num_iters: int


def cg_sense(
    y: KSpaceVolume,
    e: SmsEncodingOperator,
    mu: float = 0.0,
    prior: SliceStackImage | None = None,
    max_iter: int = 50,
    tol: float = 1e-8,
    emit_warning: bool = True,
) -> CgResult:
    """Krylov solve of the normal equations (E^H E + mu I) x = E^H y (+ mu * prior).

    Uses conjugate-residual iterations (the minimal-residual member of the
    conjugate-direction family for Hermitian systems), so ``residual_norms``
    -- ||b - A x_k|| for k = 0..K -- is non-increasing by construction even
    on the near-singular mu = 0 problem. Starts from zero. If the relative
    residual does not reach ``tol`` within ``max_iter``, the best iterate so
    far is returned with ``converged=False`` and a warning.
    """
    s = e.num_slices

    def normal_op(x):
        stack = SliceStackImage(data=x, num_slices=s)
        out = adjoint_sms(forward_sms(stack, e), e).data
        return out + mu * x if mu else out

    b = adjoint_sms(y, e).data
    if mu and prior is not None:
        b = b + mu * prior.data
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    ar = normal_op(r)
    ap = ar.copy()
    r_ar = np.vdot(r, ar).real
    b_norm = np.sqrt(np.vdot(b, b).real)
    history = [np.sqrt(np.vdot(r, r).real)]
    converged = b_norm == 0
    it = 0
    while not converged and it < max_iter:
        ap_sq = np.vdot(ap, ap).real
        if ap_sq == 0 or r_ar == 0:
            converged = True  # stagnated in the null space: residual is optimal
            break
        alpha = r_ar / ap_sq
        x = x + alpha * p
        r = r - alpha * ap
        history.append(np.sqrt(np.vdot(r, r).real))
        it += 1
        if history[-1] <= tol * b_norm:
            converged = True
            break
        ar_new = normal_op(r)
        r_ar_new = np.vdot(r, ar_new).real
        beta = r_ar_new / r_ar
        p = r + beta * p
        ap = ar_new + beta * ap
        ar, r_ar = ar_new, r_ar_new
    if not converged and emit_warning:
        warnings.warn(
            f"cg_sense did not reach tol={tol} in {max_iter} iterations "
            f"(relative residual {history[-1] / b_norm:.2e})",
            RuntimeWarning,
        )
    return CgResult(
        image=SliceStackImage(data=x, num_slices=s),
        residual_norms=np.asarray(history),
        converged=converged,
        num_iters=it,
    )
