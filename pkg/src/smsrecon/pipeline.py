"""Experiment orchestration: simulate, train, reconstruct, analyze, report.

Each stage is a plain function over directories in the dataset format, so
the CLI wrappers stay thin. Every output directory receives the exact
config that produced it; re-running a stage from its recorded config in
deterministic mode reproduces all numeric outputs bit-exactly.

Train and test phantoms use disjoint seed ranges (mirroring training on a
few slab groups and evaluating on unseen subjects), and training examples
are single time frames, so no temporal information crosses into training.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .operators import (
    KSpaceVolume,
    SamplingMask,
    SliceStackImage,
    SmsEncodingOperator,
    CoilSensitivities,
    acs_block_mask,
    default_caipi_shifts,
    uniform_mask,
)
from .phantom import (
    NoiseModel,
    collapse_sms,
    frame_stack,
    make_phantom,
    make_retinotopy_activation,
    make_sensitivities,
    random_phantom_spec,
    sample_kspace,
    sigma_for_snr,
    single_band_kspace,
    RUNS,
)
from .baseline import apply_split_sg, calibrate_split_sg, cg_sense
from .unrolled import unrolled_forward
from .training import (
    TrainingConfig,
    TrainingSlab,
    nmse,
    train_self_supervised,
    train_supervised,
)
from .analysis import (
    CoherenceConfig,
    VoxelTimeSeries,
    analyze_run_pair,
    percent_change,
)
from .dataset import (
    DATASET_FORMAT,
    DatasetReader,
    DatasetWriter,
    load_checkpoint,
    save_checkpoint,
    write_key_value_config,
)

TRAIN_SEED_BLOCK = 0  # train phantom seeds: base*100000 + i
TEST_SEED_BLOCK = 50_000  # test phantom seeds: base*100000 + 50000 + i


class ConfigError(ValueError):
    """Bad configuration or usage; exits with code 2."""


class NumericalError(RuntimeError):
    """Non-finite results or diverged optimization; exits with code 3."""


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce one end-to-end experiment."""

    grid: tuple[int, int] = (64, 64)
    num_slices: int = 3
    num_coils: int = 8
    r: int = 2
    acs_lines: int = 24
    fov_shifts: tuple[float, ...] | None = None
    num_train: int = 8
    num_test: int = 4
    snr: float = 20.0
    base_seed: int = 0
    amplitude: float = 0.05
    task_period: float = 32.0
    repetition_time: float = 1.0
    num_frames: int = 128
    training: TrainingConfig = field(default_factory=TrainingConfig)
    poly_order: int = 3
    hemodynamic_shift: int = 0
    coherence_threshold: float = 0.55
    coherence_segment_periods: int = 1
    coherence_overlap: float = 0.75
    coherence_window: str = "hann"

    def __post_init__(self):
        if self.num_test < 1 or self.num_train < 1:
            raise ConfigError("need at least one train and one test phantom")
        if self.fov_shifts is not None and len(self.fov_shifts) != self.num_slices:
            raise ConfigError("fov_shifts length must equal num_slices")

    @property
    def shifts(self) -> tuple[float, ...]:
        return self.fov_shifts or default_caipi_shifts(self.num_slices)

    def mask(self) -> SamplingMask:
        return uniform_mask(self.grid, self.r, acs_lines=self.acs_lines)

    def coherence_config(self) -> CoherenceConfig:
        return CoherenceConfig(
            segment_periods=self.coherence_segment_periods,
            overlap_fraction=self.coherence_overlap,
            window=self.coherence_window,
        )

    def train_seed(self, i: int) -> int:
        return self.base_seed * 100_000 + TRAIN_SEED_BLOCK + i

    def test_seed(self, i: int) -> int:
        return self.base_seed * 100_000 + TEST_SEED_BLOCK + i

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = list(self.grid)
        d["fov_shifts"] = None if self.fov_shifts is None else list(self.fov_shifts)
        d["training"] = self.training.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        d["grid"] = tuple(d["grid"])
        if d.get("fov_shifts") is not None:
            d["fov_shifts"] = tuple(d["fov_shifts"])
        d["training"] = TrainingConfig.from_dict(d["training"])
        return cls(**d)

    def save(self, path: Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path: Path) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (KeyError, TypeError, ValueError) as err:
            raise ConfigError(f"bad experiment config {path}: {err}") from None


def max_workers() -> int:
    """Frame-level parallelism cap, overridable via SMSRECON_MAX_WORKERS."""
    env = os.environ.get("SMSRECON_MAX_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"SMSRECON_MAX_WORKERS={env!r} is not an integer") from None
    return min(4, os.cpu_count() or 1)


def set_deterministic(seed: int, num_threads: int = 1) -> None:
    torch.manual_seed(seed)
    torch.set_num_threads(num_threads)
    torch.use_deterministic_algorithms(True)


# ---------------------------------------------------------------------------
# simulate


def _phantom_parts(config: ExperimentConfig, seed: int):
    spec = random_phantom_spec(config.grid, config.num_slices, config.num_coils, seed=seed)
    phantom = make_phantom(spec)
    sens = make_sensitivities(spec)
    noise = NoiseModel(sigma=sigma_for_snr(phantom, config.snr), seed=seed)
    return phantom, sens, noise


def simulate_experiment(config: ExperimentConfig, out_dir: Path) -> Path:
    """Write the full dataset: training slabs (one static frame each) and
    test phantoms with two task runs of undersampled SMS k-space plus all
    ground truth needed downstream."""
    out_dir = Path(out_dir)
    mask = config.mask()
    acs = acs_block_mask(config.grid, config.acs_lines)
    meta = {
        "config": config.to_dict(),
        "version": __version__,
        "train_seeds": [config.train_seed(i) for i in range(config.num_train)],
        "test_seeds": [config.test_seed(i) for i in range(config.num_test)],
    }
    writer = DatasetWriter(out_dir, meta=meta)
    writer.add("mask", mask.kept.astype(np.uint8))
    writer.add("acs", acs.astype(np.uint8))

    for i in range(config.num_train):
        seed = config.train_seed(i)
        phantom, sens, noise = _phantom_parts(config, seed)
        sb = single_band_kspace(phantom, sens)
        slab = sample_kspace(sb, mask, config.shifts, noise=noise, stream=(0,))
        base = f"train/{i:03d}"
        writer.add(f"{base}/y", slab.acquired.data.astype(np.complex64))
        writer.add(f"{base}/sens", sens.maps.astype(np.complex64))
        writer.add(f"{base}/truth", phantom.data.astype(np.complex64))
        # noiseless collapse (diagnostics) and the fully sampled measurement
        # (supervised-training reference; noisy like any real acquisition)
        writer.add(f"{base}/y_full", collapse_sms(sb, config.shifts).astype(np.complex64))
        writer.add(f"{base}/y_full_meas", slab.full_measured.astype(np.complex64))
        writer.add(f"{base}/calib", slab.calibration.astype(np.complex64))

    activation = make_retinotopy_activation(
        config.grid,
        config.num_slices,
        amplitude=config.amplitude,
        num_frames=config.num_frames,
        task_period=config.task_period,
        repetition_time=config.repetition_time,
    )
    for i in range(config.num_test):
        seed = config.test_seed(i)
        phantom, sens, noise = _phantom_parts(config, seed)
        base = f"test/{i:03d}"
        writer.add(f"{base}/sens", sens.maps.astype(np.complex64))
        writer.add(f"{base}/truth0", phantom.data.astype(np.complex64))
        writer.add(f"{base}/active", activation.mask.astype(np.uint8))
        writer.add(f"{base}/active_phase", activation.phase)
        sb0 = single_band_kspace(phantom, sens)
        slab0 = sample_kspace(sb0, mask, config.shifts, noise=noise, stream=(9, 0))
        writer.add(f"{base}/calib", slab0.calibration.astype(np.complex64))
        h, n = phantom.data.shape
        for run_idx, run in enumerate(RUNS):
            ksp = np.zeros((config.num_frames, config.num_coils) + config.grid,
                           dtype=np.complex64)
            truth = np.zeros((config.num_frames, h, n), dtype=np.complex64)
            for t in range(config.num_frames):
                stack = frame_stack(phantom, activation, run, t)
                sb = single_band_kspace(stack, sens)
                slab = sample_kspace(sb, mask, config.shifts, noise=noise,
                                     stream=(run_idx, t))
                ksp[t] = slab.acquired.data
                truth[t] = stack.data
            writer.add(f"{base}/{run}/ksp", ksp)
            writer.add(f"{base}/{run}/truth", truth)
    writer.finish()
    config.save(out_dir / "config.json")
    return out_dir


# ---------------------------------------------------------------------------
# shared dataset access


def _operator_from(reader: DatasetReader, sens: np.ndarray) -> SmsEncodingOperator:
    config = ExperimentConfig.from_dict(reader.meta["config"])
    mask = SamplingMask(kept=reader.load("mask").astype(bool), acceleration=float(config.r))
    return SmsEncodingOperator(
        sens=CoilSensitivities(maps=sens.astype(np.complex128)),
        mask=mask,
        fov_shifts=config.shifts,
    )


def load_training_slabs(dataset_dir: Path) -> list[TrainingSlab]:
    reader = DatasetReader(dataset_dir)
    acs = reader.load("acs").astype(bool)
    slabs = []
    i = 0
    while f"train/{i:03d}/y" in reader.names():
        base = f"train/{i:03d}"
        sens = reader.load(f"{base}/sens")
        slabs.append(
            TrainingSlab(
                y=reader.load(f"{base}/y").astype(np.complex128),
                operator=_operator_from(reader, sens),
                acs=acs,
                truth=reader.load(f"{base}/truth").astype(np.complex128),
                y_full=reader.load(f"{base}/y_full_meas").astype(np.complex128),
                name=base,
            )
        )
        i += 1
    if not slabs:
        raise ConfigError(f"{dataset_dir} contains no training slabs")
    return slabs


def load_test_slabs(dataset_dir: Path) -> list[TrainingSlab]:
    """Frame-0 CCW slabs of the test phantoms, for held-out NMSE evaluation."""
    reader = DatasetReader(dataset_dir)
    acs = reader.load("acs").astype(bool)
    slabs = []
    i = 0
    while f"test/{i:03d}/sens" in reader.names():
        base = f"test/{i:03d}"
        sens = reader.load(f"{base}/sens")
        slabs.append(
            TrainingSlab(
                y=reader.load(f"{base}/ccw/ksp")[0].astype(np.complex128),
                operator=_operator_from(reader, sens),
                acs=acs,
                truth=reader.load(f"{base}/ccw/truth")[0].astype(np.complex128),
                name=base,
            )
        )
        i += 1
    if not slabs:
        raise ConfigError(f"{dataset_dir} contains no test phantoms")
    return slabs


# ---------------------------------------------------------------------------
# train


def train_experiment(
    dataset_dir: Path,
    mode: str,
    out_dir: Path,
    seed_override: int | None = None,
    deterministic: bool = False,
) -> Path:
    """Train on the dataset's training slabs and write a checkpoint + loss CSV."""
    if mode not in ("self-supervised", "supervised"):
        raise ConfigError(f"mode must be self-supervised or supervised, got {mode!r}")
    reader = DatasetReader(dataset_dir)
    config = ExperimentConfig.from_dict(reader.meta["config"])
    tcfg = config.training
    if seed_override is not None:
        tcfg = TrainingConfig.from_dict({**tcfg.to_dict(), "seed": seed_override})
    if deterministic:
        set_deterministic(tcfg.seed)

    slabs = load_training_slabs(dataset_dir)
    test_names = {s.name for s in load_test_slabs(dataset_dir)}
    train_names = {s.name for s in slabs}
    assert not (train_names & test_names), "train/test phantom identifiers overlap"

    trainer = train_self_supervised if mode == "self-supervised" else train_supervised
    result = trainer(slabs, tcfg)
    if result.diverged:
        raise NumericalError("training diverged (non-finite loss or gradient); "
                             "last good checkpoint kept in memory only")
    out_dir = Path(out_dir)
    save_checkpoint(
        out_dir,
        result.model,
        training_config=tcfg.to_dict(),
        seed=tcfg.seed,
        extra_meta={"mode": mode, "dataset": str(dataset_dir),
                    "final_train_loss": result.history[-1]["train_loss"]},
    )
    result.write_history_csv(out_dir / "loss_history.csv")
    return out_dir


# ---------------------------------------------------------------------------
# reconstruct

METHODS = ("split-sg", "cg-sense", "dl")


def _reconstruct_frames(method, frames, e, calib, model, config) -> np.ndarray:
    """Reconstruct (F, C, M, N) -> (F, S*M, N) complex, frame-parallel."""
    s, (m, n) = e.num_slices, e.grid
    out = np.zeros((frames.shape[0], s * m, n), dtype=np.complex128)

    if method == "split-sg":
        kernels = calibrate_split_sg(
            calib.astype(np.complex128), r=config.r, fov_shifts=e.fov_shifts
        )

        def recon(t):
            out[t] = apply_split_sg(KSpaceVolume(data=frames[t].astype(np.complex128)),
                                    kernels, e).data
    elif method == "cg-sense":
        # 50 iterations acts as implicit regularization; no warning spam
        def recon(t):
            res = cg_sense(KSpaceVolume(data=frames[t].astype(np.complex128)), e,
                           max_iter=50, tol=1e-8, emit_warning=False)
            out[t] = res.image.data
    else:

        def recon(t):
            out[t] = unrolled_forward(
                KSpaceVolume(data=frames[t].astype(np.complex128)), e, model
            ).data

    workers = max_workers()
    if workers == 1 or method == "dl":  # torch inference already uses its threads
        for t in range(frames.shape[0]):
            recon(t)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(recon, range(frames.shape[0])))
    return out


def reconstruct_experiment(
    dataset_dir: Path,
    method: str,
    out_dir: Path,
    checkpoint: Path | None = None,
    deterministic: bool = False,
) -> Path:
    """Reconstruct the whole test time series with one method; writes f32
    magnitude + phase arrays per phantom and run, plus per-frame NMSE CSVs."""
    if method not in METHODS:
        raise ConfigError(f"method must be one of {METHODS}, got {method!r}")
    model = None
    ckpt_meta = {}
    if method == "dl":
        if checkpoint is None:
            raise ConfigError("method 'dl' requires --checkpoint")
        model, ckpt_meta = load_checkpoint(checkpoint)
    reader = DatasetReader(dataset_dir)
    config = ExperimentConfig.from_dict(reader.meta["config"])
    if deterministic:
        set_deterministic(config.base_seed)

    out_dir = Path(out_dir)
    writer = DatasetWriter(
        out_dir,
        meta={
            "config": config.to_dict(),
            "method": method,
            "dataset": str(dataset_dir),
            "checkpoint": None if checkpoint is None else str(checkpoint),
            "checkpoint_meta": {k: v for k, v in ckpt_meta.items()
                                if k in ("mode", "seed", "mu", "final_train_loss")},
            "version": __version__,
        },
    )
    nmse_rows = ["phantom,run,frame,nmse"]
    i = 0
    while f"test/{i:03d}/sens" in reader.names():
        base = f"test/{i:03d}"
        sens = reader.load(f"{base}/sens")
        e = _operator_from(reader, sens)
        calib = reader.load(f"{base}/calib")
        for run in RUNS:
            frames = reader.load(f"{base}/{run}/ksp")
            truth = reader.load(f"{base}/{run}/truth")
            recon = _reconstruct_frames(method, frames, e, calib, model, config)
            if not np.all(np.isfinite(recon)):
                raise NumericalError(f"non-finite reconstruction in {base}/{run}")
            writer.add(f"{base}/{run}/mag", np.abs(recon).astype(np.float32))
            writer.add(f"{base}/{run}/phase", np.angle(recon).astype(np.float32))
            for t in range(frames.shape[0]):
                nmse_rows.append(
                    f"{i},{run},{t},{nmse(recon[t], truth[t].astype(np.complex128)):.8e}"
                )
        i += 1
    if i == 0:
        raise ConfigError(f"{dataset_dir} contains no test phantoms")
    writer.finish()
    (out_dir / "nmse.csv").write_text("\n".join(nmse_rows) + "\n")
    config.save(out_dir / "config.json")
    return out_dir


# ---------------------------------------------------------------------------
# analyze


def _support_mask(truth0: np.ndarray) -> np.ndarray:
    mag = np.abs(truth0)
    return mag > 0.05 * mag.max()


def analyze_experiment(
    dataset_dir: Path, recon_dirs: list[Path], out_dir: Path, render: bool = True
) -> Path:
    """Run the functional chain on each reconstruction and write per-voxel
    metric arrays, map images and a CSV summary."""
    reader = DatasetReader(dataset_dir)
    config = ExperimentConfig.from_dict(reader.meta["config"])
    out_dir = Path(out_dir)
    summary = [
        "label,phantom,mean_tsnr_support,surviving_voxels,"
        "median_abs_phase_err_vs_truth,mean_amplitude_active"
    ]
    writer = DatasetWriter(out_dir, meta={"config": config.to_dict(),
                                          "recons": [str(r) for r in recon_dirs]})
    labels = [Path(r).name for r in recon_dirs]
    if len(set(labels)) != len(labels):
        raise ConfigError(f"recon directory names must be unique, got {labels}")
    for label, recon_dir in zip(labels, recon_dirs):
        rec = DatasetReader(recon_dir)
        i = 0
        while f"test/{i:03d}/ccw/mag" in rec.names():
            base = f"test/{i:03d}"
            truth0 = reader.load(f"{base}/truth0")
            support = _support_mask(truth0)
            active = reader.load(f"{base}/active").astype(bool)
            true_phase = reader.load(f"{base}/active_phase")
            shape = truth0.shape
            series = {}
            for run in RUNS:
                mag = rec.load(f"{base}/{run}/mag").astype(np.float64)
                series[run] = VoxelTimeSeries(
                    values=mag.reshape(mag.shape[0], -1).T,
                    tr=config.repetition_time,
                    run=run,
                    grid_shape=shape,
                )
            result = analyze_run_pair(
                series["ccw"],
                series["cw"],
                config.task_period,
                hemodynamic_shift=config.hemodynamic_shift,
                poly_order=config.poly_order,
                coherence_threshold=config.coherence_threshold,
                coherence_config=config.coherence_config(),
            )
            name = f"{label}/{base}"
            writer.add(f"{name}/tsnr", result.tsnr.reshape(shape))
            writer.add(f"{name}/phase", result.phase.reshape(shape))
            writer.add(f"{name}/coherence", result.coherence.reshape(shape))
            writer.add(f"{name}/amplitude", result.amplitude.reshape(shape))
            writer.add(f"{name}/surviving",
                       result.phase_map.surviving.reshape(shape).astype(np.uint8))
            surviving = result.phase_map.surviving.reshape(shape)
            tsnr_map = result.tsnr.reshape(shape)
            finite_support = support & np.isfinite(tsnr_map)
            sel = surviving & active
            phase_err = np.abs(
                np.angle(np.exp(1j * (result.phase.reshape(shape) - true_phase)))
            )
            med_err = float(np.median(phase_err[sel])) if sel.any() else float("nan")
            amp_mean = float(result.amplitude.reshape(shape)[active].mean())
            summary.append(
                f"{label},{i},{tsnr_map[finite_support].mean():.4f},"
                f"{int(surviving.sum())},{med_err:.5f},{amp_mean:.4f}"
            )
            if render:
                _render_maps(out_dir / "maps", f"{label}_{i:03d}", tsnr_map,
                             result.coherence.reshape(shape),
                             result.phase.reshape(shape), surviving,
                             config.coherence_threshold)
            i += 1
    writer.finish()
    (out_dir / "summary.csv").write_text("\n".join(summary) + "\n")
    return out_dir


def report_experiment(
    analysis_dir: Path, proposed: str, baseline: str, out_dir: Path, render: bool = True
) -> dict:
    """Paired comparison of two analyzed reconstructions: tSNR percent-change
    maps, surviving-voxel counts and phase agreement over common survivors."""
    reader = DatasetReader(analysis_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = [
        "phantom,mean_tsnr_proposed,mean_tsnr_baseline,mean_pct_change_support,"
        "surviving_proposed,surviving_baseline,median_abs_phase_diff"
    ]
    config = ExperimentConfig.from_dict(reader.meta["config"])
    results = []
    i = 0
    while f"{proposed}/test/{i:03d}/tsnr" in reader.names():
        base = f"test/{i:03d}"
        tsnr_p = reader.load(f"{proposed}/{base}/tsnr")
        tsnr_b = reader.load(f"{baseline}/{base}/tsnr")
        surv_p = reader.load(f"{proposed}/{base}/surviving").astype(bool)
        surv_b = reader.load(f"{baseline}/{base}/surviving").astype(bool)
        phase_p = reader.load(f"{proposed}/{base}/phase")
        phase_b = reader.load(f"{baseline}/{base}/phase")
        finite = np.isfinite(tsnr_p) & np.isfinite(tsnr_b) & (tsnr_b > 0)
        pct = percent_change(np.where(finite, tsnr_p, 0), np.where(finite, tsnr_b, 1))
        common = surv_p & surv_b
        dphi = np.abs(np.angle(np.exp(1j * (phase_p - phase_b))))
        med = float(np.median(dphi[common])) if common.any() else float("nan")
        row = {
            "phantom": i,
            "mean_tsnr_proposed": float(tsnr_p[finite].mean()),
            "mean_tsnr_baseline": float(tsnr_b[finite].mean()),
            "mean_pct_change_support": float(pct[finite].mean()),
            "surviving_proposed": int(surv_p.sum()),
            "surviving_baseline": int(surv_b.sum()),
            "median_abs_phase_diff": med,
        }
        results.append(row)
        rows.append(
            f"{i},{row['mean_tsnr_proposed']:.4f},{row['mean_tsnr_baseline']:.4f},"
            f"{row['mean_pct_change_support']:.2f},{row['surviving_proposed']},"
            f"{row['surviving_baseline']},{med:.5f}"
        )
        if render:
            _render_pct_change(out_dir, f"tsnr_pct_change_{i:03d}.png",
                               np.where(finite, pct, np.nan))
        i += 1
    if not results:
        raise ConfigError(
            f"analysis dir {analysis_dir} has no entries for {proposed!r}/{baseline!r}"
        )
    (out_dir / "report.csv").write_text("\n".join(rows) + "\n")
    (out_dir / "report.json").write_text(json.dumps(
        {"proposed": proposed, "baseline": baseline, "phantoms": results}, indent=1))
    return {"proposed": proposed, "baseline": baseline, "phantoms": results}


# ---------------------------------------------------------------------------
# map rendering


def _render_maps(map_dir, tag, tsnr_map, coherence, phase, surviving, threshold):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    map_dir = Path(map_dir)
    map_dir.mkdir(parents=True, exist_ok=True)
    finite = np.isfinite(tsnr_map)
    fig, axes = plt.subplots(1, 3, figsize=(12, 4.2))
    im0 = axes[0].imshow(np.where(finite, tsnr_map, 0), cmap="viridis")
    axes[0].set_title("tSNR")
    fig.colorbar(im0, ax=axes[0], shrink=0.8)
    im1 = axes[1].imshow(coherence, cmap="magma", vmin=0, vmax=1)
    axes[1].set_title("coherence")
    fig.colorbar(im1, ax=axes[1], shrink=0.8)
    masked = np.where(surviving, phase, np.nan)
    im2 = axes[2].imshow(masked, cmap="hsv", vmin=-np.pi, vmax=np.pi)
    axes[2].set_title(f"phase (coherence >= {threshold})")
    fig.colorbar(im2, ax=axes[2], shrink=0.8, label="polar angle (rad)")
    for ax in axes:
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(map_dir / f"{tag}.png", dpi=110)
    plt.close(fig)


def _render_pct_change(out_dir, name, pct):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    lim = np.nanpercentile(np.abs(pct), 98) if np.isfinite(pct).any() else 1.0
    fig, ax = plt.subplots(figsize=(4.6, 4.2))
    im = ax.imshow(pct, cmap="RdBu_r", vmin=-lim, vmax=lim)
    ax.set_title("tSNR change (%)")
    ax.axis("off")
    fig.colorbar(im, ax=ax, shrink=0.85)
    fig.tight_layout()
    fig.savefig(Path(out_dir) / name, dpi=110)
    plt.close(fig)
