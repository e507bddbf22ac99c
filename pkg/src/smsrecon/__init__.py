"""smsrecon: SMS-accelerated fMRI reconstruction and analysis toolkit.

Subpackages cover the SMS encoding model (:mod:`smsrecon.operators`), a
synthetic fMRI slab simulator (:mod:`smsrecon.phantom`), conventional
reconstructions (:mod:`smsrecon.baseline`), the unrolled physics-guided
network (:mod:`smsrecon.unrolled`), its self-supervised and supervised
trainers (:mod:`smsrecon.training`), the task-frequency fMRI analysis chain
(:mod:`smsrecon.analysis`), and the dataset/checkpoint formats plus
experiment orchestration (:mod:`smsrecon.dataset`, :mod:`smsrecon.pipeline`).
"""

__version__ = "0.1.0"

from .operators import (
    CoilSensitivities,
    KSpaceVolume,
    SamplingMask,
    SliceStackImage,
    SmsEncodingOperator,
    adjoint_sms,
    apply_fov_shift,
    concat_slices,
    default_caipi_shifts,
    fft2c,
    forward_sms,
    full_mask,
    ifft2c,
    split_stack,
    uniform_mask,
)
