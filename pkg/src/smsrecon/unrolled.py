"""Physics-guided unrolled reconstruction: CNN regularizer + CG data consistency.

The network alternates, for a fixed number of unrolls, a residual CNN
applied to the 2-real-channel view of the slice stack with a conjugate
gradient solve of the quadratic data-consistency subproblem
(E^H E + mu I) x = E^H y + mu z. The whole computation, CG iterations
included, is an explicit fixed-iteration graph, so reverse-mode autograd
gives exact gradients of any scalar loss through it.

Because the encoding operator applies the CAIPI FOV shifts internally, the
iterates handled here are always in unshifted (anatomical) slice
coordinates, which is what the CNN should see; ``regularizer_apply`` also
accepts an explicit shift schedule for callers whose stacks are still in
the shifted acquisition frame.

Complex stacks enter the CNN as 2 real channels (real, imaginary); the
network is therefore not equivariant to a global phase rotation, which is
expected for this architecture family and deliberately not asserted
anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np
import torch

from .operators import KSpaceVolume, SliceStackImage, SmsEncodingOperator


@dataclass(frozen=True)
class UnrolledConfig:
    """Architecture and unrolling hyperparameters.

    Defaults follow the full-scale setup (10 unrolls, CG in every DC unit,
    one weight-shared ResNet regularizer of residual blocks without
    normalization layers, residual branches scaled by 0.1).
    """

    num_unrolls: int = 10
    cg_iters_per_dc: int = 10
    share_weights: bool = True
    num_res_blocks: int = 4
    channels: int = 32
    kernel_size: int = 3
    res_scale: float = 0.1

    def __post_init__(self):
        if self.num_unrolls < 1:
            raise ValueError("num_unrolls must be >= 1")
        if self.cg_iters_per_dc < 1:
            raise ValueError("cg_iters_per_dc must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "UnrolledConfig":
        return cls(**d)


class TorchSmsOperator:
    """Torch twin of :class:`SmsEncodingOperator` (differentiable, batched
    over nothing: one slab)."""

    def __init__(self, e: SmsEncodingOperator, dtype: torch.dtype = torch.complex64):
        self.num_slices = e.num_slices
        self.num_coils = e.num_coils
        self.grid = e.grid
        self.dtype = dtype
        self.sens = torch.from_numpy(np.ascontiguousarray(e.sens.maps)).to(dtype)
        self.mask = torch.from_numpy(e.mask.kept.copy())
        m, n = e.grid
        ramps = np.stack(
            [
                np.exp(
                    -2j
                    * np.pi
                    * ((np.arange(n) - n // 2) / n)
                    * (shift * n)
                )
                for shift in e.fov_shifts
            ]
        )
        self.ramps = torch.from_numpy(ramps).to(dtype).reshape(self.num_slices, 1, 1, n)

    def _fft2c(self, x):
        return torch.fft.fftshift(
            torch.fft.fft2(torch.fft.ifftshift(x, dim=(-2, -1)), norm="ortho"),
            dim=(-2, -1),
        )

    def _ifft2c(self, x):
        return torch.fft.fftshift(
            torch.fft.ifft2(torch.fft.ifftshift(x, dim=(-2, -1)), norm="ortho"),
            dim=(-2, -1),
        )

    def forward(self, stack: torch.Tensor) -> torch.Tensor:
        """(S*M, N) complex stack -> (C, M, N) collapsed k-space."""
        m, n = self.grid
        imgs = stack.reshape(self.num_slices, 1, m, n)
        ksp = self._fft2c(self.sens * imgs) * self.ramps
        ksp = ksp.sum(dim=0)
        return torch.where(self.mask, ksp, torch.zeros((), dtype=self.dtype))

    def adjoint(self, ksp: torch.Tensor) -> torch.Tensor:
        """(C, M, N) k-space -> (S*M, N) complex stack."""
        m, n = self.grid
        masked = torch.where(self.mask, ksp, torch.zeros((), dtype=self.dtype))
        per_slice = self._ifft2c(masked.unsqueeze(0) * self.ramps.conj())
        stack = (self.sens.conj() * per_slice).sum(dim=1)
        return stack.reshape(self.num_slices * m, n)

    def normal(self, stack: torch.Tensor) -> torch.Tensor:
        return self.adjoint(self.forward(stack))

    def with_mask(self, kept: np.ndarray) -> "TorchSmsOperator":
        import copy

        out = copy.copy(self)
        out.mask = torch.from_numpy(kept.copy())
        return out


def complex_to_channels(stack: torch.Tensor) -> torch.Tensor:
    """(H, W) complex -> (1, 2, H, W) real."""
    return torch.stack([stack.real, stack.imag], dim=0).unsqueeze(0)


def channels_to_complex(x: torch.Tensor) -> torch.Tensor:
    """(1, 2, H, W) real -> (H, W) complex."""
    return torch.complex(x[0, 0], x[0, 1])


class ResBlock(torch.nn.Module):
    def __init__(self, channels, kernel_size, res_scale):
        super().__init__()
        pad = kernel_size // 2
        self.conv1 = torch.nn.Conv2d(channels, channels, kernel_size, padding=pad)
        self.conv2 = torch.nn.Conv2d(channels, channels, kernel_size, padding=pad)
        self.res_scale = res_scale

    def forward(self, x):
        return x + self.res_scale * self.conv2(torch.relu(self.conv1(x)))


class ResNetRegularizer(torch.nn.Module):
    """Residual CNN on the 2-channel complex view; the final projection is
    zero-initialized, so a fresh network is exactly the identity map."""

    def __init__(self, config: UnrolledConfig):
        super().__init__()
        ch, k = config.channels, config.kernel_size
        pad = k // 2
        self.conv_in = torch.nn.Conv2d(2, ch, k, padding=pad)
        self.blocks = torch.nn.ModuleList(
            ResBlock(ch, k, config.res_scale) for _ in range(config.num_res_blocks)
        )
        self.conv_out = torch.nn.Conv2d(ch, 2, k, padding=pad)
        torch.nn.init.zeros_(self.conv_out.weight)
        torch.nn.init.zeros_(self.conv_out.bias)

    def forward(self, x):
        h = self.conv_in(x)
        for block in self.blocks:
            h = block(h)
        return x + self.conv_out(h)


class UnrolledNet(torch.nn.Module):
    """Regularizer weights plus the (trainable, positive) penalty mu.

    mu is stored as log(mu) so positivity holds by construction.
    """

    def __init__(self, config: UnrolledConfig, mu_init: float = 0.05):
        super().__init__()
        self.config = config
        num_regs = 1 if config.share_weights else config.num_unrolls
        self.regularizers = torch.nn.ModuleList(
            ResNetRegularizer(config) for _ in range(num_regs)
        )
        self.log_mu = torch.nn.Parameter(torch.tensor(float(np.log(mu_init))))

    @property
    def mu(self) -> torch.Tensor:
        return torch.exp(self.log_mu)

    def regularizer(self, unroll_index: int) -> ResNetRegularizer:
        return self.regularizers[0 if self.config.share_weights else unroll_index]


def build_model(
    config: UnrolledConfig,
    mu_init: float = 0.05,
    seed: int = 0,
    dtype: torch.dtype = torch.float32,
) -> UnrolledNet:
    """Deterministically initialized network in the requested real dtype."""
    torch.manual_seed(seed)
    model = UnrolledNet(config, mu_init=mu_init)
    return model.to(dtype)


def _real_dtype_of(complex_dtype: torch.dtype) -> torch.dtype:
    return torch.float64 if complex_dtype == torch.complex128 else torch.float32


def _complex_dtype_of(real_dtype: torch.dtype) -> torch.dtype:
    return torch.complex128 if real_dtype == torch.float64 else torch.complex64


def model_dtype(model: UnrolledNet) -> torch.dtype:
    return next(model.parameters()).dtype


def _apply_regularizer_t(model: UnrolledNet, x: torch.Tensor, unroll_index: int = 0):
    net = model.regularizer(unroll_index)
    return channels_to_complex(net(complex_to_channels(x)))


def _fov_shift_t(stack: torch.Tensor, shifts, num_slices: int, inverse: bool):
    """Per-slice circular FOV shift of a (S*M, N) stack via a phase ramp."""
    h, n = stack.shape
    m = h // num_slices
    freqs = torch.fft.fftfreq(n, dtype=stack.real.dtype)
    out = []
    for i in range(num_slices):
        pixels = float(shifts[i]) * n
        if inverse:
            pixels = -pixels
        phase = torch.exp(-2j * np.pi * freqs * pixels).to(stack.dtype)
        sl = stack[i * m : (i + 1) * m]
        out.append(torch.fft.ifft(torch.fft.fft(sl, dim=-1) * phase, dim=-1))
    return torch.cat(out, dim=0)


def dc_solve_t(
    y: torch.Tensor,
    e_t: TorchSmsOperator,
    z: torch.Tensor,
    mu: torch.Tensor | float,
    cg_iters: int,
):
    """CG solve of (E^H E + mu I) x = E^H y + mu z, warm-started at z.

    Runs a fixed number of iterations (the unrolled computation graph);
    returns the iterate and the detached residual-norm history.
    """
    b = e_t.adjoint(y) + mu * z
    x = z
    r = b - (e_t.normal(x) + mu * x)
    p = r
    rs = torch.sum(r.conj() * r).real
    history = [float(torch.sqrt(rs.detach()))]
    for _ in range(cg_iters):
        ap = e_t.normal(p) + mu * p
        p_ap = torch.sum(p.conj() * ap).real
        alpha = rs / torch.clamp(p_ap, min=torch.finfo(rs.dtype).tiny)
        x = x + alpha.to(x.dtype) * p
        r = r - alpha.to(x.dtype) * ap
        rs_new = torch.sum(r.conj() * r).real
        history.append(float(torch.sqrt(rs_new.detach())))
        beta = rs_new / torch.clamp(rs, min=torch.finfo(rs.dtype).tiny)
        p = r + beta.to(x.dtype) * p
        rs = rs_new
    return x, history


def unrolled_forward_t(
    y: torch.Tensor, e_t: TorchSmsOperator, model: UnrolledNet
) -> torch.Tensor:
    """Full unroll on torch tensors: x0 = E^H y, then L alternations of the
    regularizer and the DC solve. The slab is normalized by the 95th
    percentile of |E^H y| before the network and un-scaled on the way out.
    """
    cfg = model.config
    x0 = e_t.adjoint(y)
    scale = torch.quantile(torch.abs(x0).detach().flatten(), 0.95)
    if float(scale) == 0.0:
        scale = torch.ones_like(scale)
    y_n = y / scale.to(y.dtype)
    x = x0 / scale.to(x0.dtype)
    mu = model.mu
    for l in range(cfg.num_unrolls):
        z = _apply_regularizer_t(model, x, l)
        x, _ = dc_solve_t(y_n, e_t, z, mu, cfg.cg_iters_per_dc)
    return x * scale.to(x.dtype)


# ---------------------------------------------------------------------------
# numpy-facing wrappers


def _to_torch_complex(a: np.ndarray, dtype: torch.dtype) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(a)).to(dtype)


def regularizer_apply(
    x: SliceStackImage, model: UnrolledNet, fov_shifts=None
) -> SliceStackImage:
    """Run the regularizer CNN on a slice stack.

    If ``fov_shifts`` is given, the stack is taken to be in the shifted
    acquisition frame: shifts are removed before the CNN and re-applied
    after, so the network always sees anatomical slices. Stacks produced by
    this package's operators are already anatomical and need no shifts.
    """
    cdtype = _complex_dtype_of(model_dtype(model))
    t = _to_torch_complex(x.data, cdtype)
    with torch.no_grad():
        if fov_shifts is not None:
            t = _fov_shift_t(t, fov_shifts, x.num_slices, inverse=True)
        out = _apply_regularizer_t(model, t)
        if fov_shifts is not None:
            out = _fov_shift_t(out, fov_shifts, x.num_slices, inverse=False)
    return SliceStackImage(data=out.numpy(), num_slices=x.num_slices)


@dataclass
class DcResult:
    image: SliceStackImage
    residual_norms: np.ndarray


def dc_solve(
    y: KSpaceVolume,
    e: SmsEncodingOperator,
    z: SliceStackImage,
    mu: float,
    cg_iters: int = 10,
    dtype: torch.dtype = torch.complex128,
) -> DcResult:
    """Data-consistency subproblem solve (numpy in, numpy out)."""
    if mu <= 0:
        raise ValueError(f"mu must be > 0, got {mu}")
    e_t = TorchSmsOperator(e, dtype=dtype)
    with torch.no_grad():
        x, history = dc_solve_t(
            _to_torch_complex(y.data, dtype), e_t, _to_torch_complex(z.data, dtype),
            float(mu), cg_iters,
        )
    return DcResult(
        image=SliceStackImage(data=x.numpy(), num_slices=e.num_slices),
        residual_norms=np.asarray(history),
    )


def unrolled_forward(
    y: KSpaceVolume,
    e: SmsEncodingOperator,
    model: UnrolledNet,
    dtype: torch.dtype | None = None,
) -> SliceStackImage:
    """Reconstruct one slab with the unrolled network (numpy in, numpy out)."""
    cdtype = dtype or _complex_dtype_of(model_dtype(model))
    e_t = TorchSmsOperator(e, dtype=cdtype)
    with torch.no_grad():
        x = unrolled_forward_t(_to_torch_complex(y.data, cdtype), e_t, model)
    return SliceStackImage(data=x.numpy(), num_slices=e.num_slices)


def gradient_of(loss: torch.Tensor, model: UnrolledNet) -> dict[str, torch.Tensor]:
    """Exact reverse-mode gradients of a scalar loss w.r.t. all parameters.

    Raises if any gradient is non-finite (the trainers abort on that).
    """
    params = dict(model.named_parameters())
    grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    out = {}
    for (name, p), g in zip(params.items(), grads):
        if g is None:  # parameter not in the graph: gradient is zero
            g = torch.zeros_like(p)
        if not torch.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for parameter {name}")
        out[name] = g
    return out
