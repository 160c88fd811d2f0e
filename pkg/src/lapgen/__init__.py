"""Desk-scale controllable surgical-scene generation sandbox.

Three-stage pipeline: text-conditioned diffusion training, segmentation-mask
control via zero-initialized convolution branches, and zero-shot temporally
coherent clip sampling, plus the full evaluation battery (FID/KID/CMMD-style
fidelity, pixel-wise mask F1, action-triplet mAP) over a deterministic
synthetic dataset with exact ground truth.
"""

__version__ = "0.1.0"
