"""Multi-mask self-supervised training (and the supervised oracle trainer).

Self-supervision splits the acquired k-space locations of every training
slab into K disjoint pairs (theta_k, lambda_k): the network's DC units see
only theta_k, the compound l1-l2 k-space loss is evaluated only on
lambda_k. The fully sampled calibration block always stays in theta_k. At
evaluation time the DC units use all acquired samples.

The supervised trainer shares everything but the loss target: the noiseless
fully sampled collapsed k-space from the simulator, evaluated on the whole
grid. It exists as the oracle for the "similar performance to supervised"
comparison, which real accelerated fMRI cannot run.
"""

from __future__ import annotations

import copy
import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .operators import SamplingMask, SliceStackImage, SmsEncodingOperator
from .unrolled import (
    TorchSmsOperator,
    UnrolledConfig,
    UnrolledNet,
    _complex_dtype_of,
    _to_torch_complex,
    build_model,
    model_dtype,
    unrolled_forward_t,
)


@dataclass(frozen=True)
class MaskPartition:
    """K disjoint (theta, lambda) splits of a parent sampling pattern."""

    pairs: tuple[tuple[SamplingMask, SamplingMask], ...]
    rho: float
    seed: int

    @property
    def k(self) -> int:
        return len(self.pairs)


def partition_mask(
    omega: SamplingMask,
    k: int,
    rho: float,
    seed: int,
    acs: np.ndarray | None = None,
) -> MaskPartition:
    """Split omega into K pairs theta_k ∪ lambda_k = omega, theta_k ∩ lambda_k = ∅.

    lambda_k is drawn uniformly without replacement from the acquired
    points outside the calibration block (``acs``), which therefore always
    stays in theta_k; each k uses an independent substream of ``seed``.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not 0 < rho < 1:
        raise ValueError(f"rho must be in (0, 1), got {rho}")
    if acs is None:
        acs = np.zeros(omega.grid, dtype=bool)
    if acs.shape != omega.kept.shape:
        raise ValueError("acs grid does not match omega")
    candidates = np.flatnonzero(omega.kept & ~acs)
    n_lam = round(rho * candidates.size)
    if n_lam < 1:
        raise ValueError("rho leaves lambda_k empty")
    if candidates.size - n_lam < 1:
        raise ValueError("rho leaves no non-calibration samples in theta_k")
    pairs = []
    for ki in range(k):
        rng = np.random.default_rng((seed, 311, ki))
        chosen = rng.choice(candidates, size=n_lam, replace=False)
        lam_flat = np.zeros(omega.kept.size, dtype=bool)
        lam_flat[chosen] = True
        lam = lam_flat.reshape(omega.kept.shape)
        theta = omega.kept & ~lam
        pairs.append(
            (
                SamplingMask(kept=theta, acceleration=omega.acceleration),
                SamplingMask(kept=lam, acceleration=omega.acceleration),
            )
        )
    return MaskPartition(pairs=tuple(pairs), rho=rho, seed=seed)


def l1l2_loss(y_ref: np.ndarray, y_hat: np.ndarray, where: np.ndarray | None = None) -> float:
    """Compound normalized loss ||d||_2/||y||_2 + ||d||_1/||y||_1 on the
    selected k-space samples; invariant to rescaling both arguments."""
    if where is not None:
        y_ref = y_ref[..., where]
        y_hat = y_hat[..., where]
    ref_l2 = np.linalg.norm(y_ref.reshape(-1))
    ref_l1 = np.abs(y_ref).sum()
    if ref_l2 == 0:
        raise ValueError("degenerate reference: ||y|| = 0")
    diff = y_ref - y_hat
    return float(np.linalg.norm(diff.reshape(-1)) / ref_l2 + np.abs(diff).sum() / ref_l1)


def l1l2_loss_t(y_ref: torch.Tensor, y_hat: torch.Tensor) -> torch.Tensor:
    """Torch twin of :func:`l1l2_loss` on already-selected samples."""
    diff = y_ref - y_hat
    l2 = torch.linalg.vector_norm(diff) / torch.linalg.vector_norm(y_ref)
    l1 = torch.sum(torch.abs(diff)) / torch.sum(torch.abs(y_ref))
    return l2 + l1


def nmse(x_hat: np.ndarray, x_ref: np.ndarray) -> float:
    return float(np.sum(np.abs(x_hat - x_ref) ** 2) / np.sum(np.abs(x_ref) ** 2))


@dataclass(frozen=True)
class TrainingConfig:
    """Optimizer and self-supervision hyperparameters (full-scale defaults)."""

    k: int = 6
    rho: float = 0.4
    epochs: int = 100
    learning_rate: float = 3e-4
    batch_size: int = 1
    seed: int = 0
    mu_init: float = 0.05
    unrolled: UnrolledConfig = field(default_factory=UnrolledConfig)
    dtype: str = "float32"

    def __post_init__(self):
        if not 0 < self.rho < 1:
            raise ValueError(f"rho must be in (0, 1), got {self.rho}")
        if self.k < 1:
            raise ValueError("k must be >= 1")

    def torch_dtype(self) -> torch.dtype:
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "unrolled"}
        d["unrolled"] = self.unrolled.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        d = dict(d)
        d["unrolled"] = UnrolledConfig.from_dict(d["unrolled"])
        return cls(**d)


@dataclass
class TrainingSlab:
    """One training example: acquired slab + geometry (+ optional truth).

    ``y`` is the collapsed k-space, exactly zero outside ``omega``. ``acs``
    marks the fully sampled calibration block inside omega. ``truth`` is the
    simulator ground-truth stack for NMSE evaluation. ``y_full`` is the
    fully sampled collapsed reference for supervised training: the measured
    fully sampled acquisition (same noise realization as ``y`` on omega), or
    the noiseless collapse in zero-noise setups.
    """

    y: np.ndarray
    operator: SmsEncodingOperator
    acs: np.ndarray
    truth: np.ndarray | None = None
    y_full: np.ndarray | None = None
    name: str = ""

    @property
    def omega(self) -> SamplingMask:
        return self.operator.mask


@dataclass
class TrainingResult:
    model: UnrolledNet
    history: list[dict]
    diverged: bool = False

    def write_history_csv(self, path) -> None:
        path = Path(path)
        with path.open("w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=["epoch", "train_loss", "val_nmse"])
            writer.writeheader()
            writer.writerows(self.history)


def set_determinism(seed: int = 0, num_threads: int = 1) -> None:
    """Deterministic mode: fixed torch seed/threads, deterministic kernels."""
    torch.manual_seed(seed)
    torch.set_num_threads(num_threads)
    torch.use_deterministic_algorithms(True)


def evaluate_nmse(model: UnrolledNet, slabs: list[TrainingSlab]) -> float:
    """Mean NMSE over slabs with ground truth; DC units use all of omega."""
    dtype = _complex_dtype_of(model_dtype(model))
    vals = []
    with torch.no_grad():
        for slab in slabs:
            if slab.truth is None:
                continue
            e_t = TorchSmsOperator(slab.operator, dtype=dtype)
            x = unrolled_forward_t(_to_torch_complex(slab.y, dtype), e_t, model)
            vals.append(nmse(x.numpy(), slab.truth))
    if not vals:
        raise ValueError("no slab carries ground truth")
    return float(np.mean(vals))


def _train_loop(slabs, config, make_step_data, model=None):
    """Shared epoch loop: Adam over per-(slab, variant) steps.

    ``make_step_data(slab_idx)`` returns a list of step closures, each
    producing a scalar torch loss when called with the model. Aborts with
    the last finite-loss checkpoint if the loss or a gradient goes
    non-finite.
    """
    if model is None:
        model = build_model(
            config.unrolled, mu_init=config.mu_init, seed=config.seed,
            dtype=config.torch_dtype(),
        )
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    steps = [(i, fn) for i in range(len(slabs)) for fn in make_step_data(i)]
    history = []
    last_good = copy.deepcopy(model.state_dict())
    val_slabs = [s for s in slabs if s.truth is not None]
    for epoch in range(config.epochs):
        order = np.random.default_rng((config.seed, 733, epoch)).permutation(len(steps))
        losses = []
        for step_idx in order:
            _, step_fn = steps[step_idx]
            optimizer.zero_grad()
            loss = step_fn(model)
            if not torch.isfinite(loss):
                model.load_state_dict(last_good)
                return TrainingResult(model=model, history=history, diverged=True)
            loss.backward()
            for p in model.parameters():
                if p.grad is not None and not torch.isfinite(p.grad).all():
                    model.load_state_dict(last_good)
                    return TrainingResult(model=model, history=history, diverged=True)
            optimizer.step()
            losses.append(float(loss.detach()))
        last_good = copy.deepcopy(model.state_dict())
        val = evaluate_nmse(model, val_slabs) if val_slabs else float("nan")
        history.append(
            {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_nmse": val}
        )
    return TrainingResult(model=model, history=history)


def train_self_supervised(
    slabs: list[TrainingSlab], config: TrainingConfig, model: UnrolledNet | None = None
) -> TrainingResult:
    """Multi-mask self-supervised training.

    For each slab, the parent pattern is split once into K (theta, lambda)
    pairs; every (slab, k) combination is one optimization step per epoch.
    The network never sees any k-space location outside the acquired set.
    """
    dtype = _complex_dtype_of(config.torch_dtype())
    step_data = []
    for slab_idx, slab in enumerate(slabs):
        partition = partition_mask(
            slab.omega, config.k, config.rho, seed=(config.seed * 100003 + slab_idx),
            acs=slab.acs,
        )
        per_slab = []
        for theta, lam in partition.pairs:
            e_theta = TorchSmsOperator(slab.operator.with_mask(theta), dtype=dtype)
            e_lam = TorchSmsOperator(slab.operator.with_mask(lam), dtype=dtype)
            y_theta = _to_torch_complex(np.where(theta.kept, slab.y, 0), dtype)
            lam_idx = torch.from_numpy(np.flatnonzero(lam.kept.reshape(-1)))
            y_lam = _to_torch_complex(slab.y.reshape(slab.y.shape[0], -1)[:, lam_idx], dtype)
            per_slab.append((e_theta, e_lam, y_theta, y_lam, lam_idx))
        step_data.append(per_slab)

    def make_steps(slab_idx):
        def make(step):
            e_theta, e_lam, y_theta, y_lam, lam_idx = step

            def run(model):
                x = unrolled_forward_t(y_theta, e_theta, model)
                y_hat_full = e_lam.forward(x)
                y_hat = y_hat_full.reshape(y_hat_full.shape[0], -1)[:, lam_idx]
                return l1l2_loss_t(y_lam, y_hat)

            return run

        return [make(step) for step in step_data[slab_idx]]

    return _train_loop(slabs, config, make_steps, model=model)


def train_supervised(
    slabs: list[TrainingSlab], config: TrainingConfig, model: UnrolledNet | None = None
) -> TrainingResult:
    """Reference trainer: same network and compound loss, but against the
    fully sampled collapsed k-space over the whole grid (what supervised
    training would use if a fully sampled scan existed)."""
    dtype = _complex_dtype_of(config.torch_dtype())
    for slab in slabs:
        if slab.y_full is None:
            raise ValueError(f"slab {slab.name!r} has no fully sampled reference")
    prepared = []
    for slab in slabs:
        e_omega = TorchSmsOperator(slab.operator, dtype=dtype)
        e_full = TorchSmsOperator(
            slab.operator.with_mask(
                SamplingMask(kept=np.ones(slab.omega.grid, dtype=bool))
            ),
            dtype=dtype,
        )
        y_omega = _to_torch_complex(slab.y, dtype)
        y_ref = _to_torch_complex(slab.y_full, dtype)
        prepared.append((e_omega, e_full, y_omega, y_ref))

    def make_steps(slab_idx):
        e_omega, e_full, y_omega, y_ref = prepared[slab_idx]

        def run(model):
            x = unrolled_forward_t(y_omega, e_omega, model)
            return l1l2_loss_t(y_ref, e_full.forward(x))

        return [run]

    return _train_loop(slabs, config, make_steps, model=model)
