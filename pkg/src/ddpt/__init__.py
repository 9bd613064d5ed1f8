"""Blind image denoising with a two-layer nonparametric mixture model.

Clean patches are modeled as low-rank Gaussian subspaces, the unknown noise
as a per-subspace Gaussian mixture; inference is truncated mean-field
coordinate ascent, and clean patches are recovered by posterior-mean
filtering.
"""

from .errors import DimensionError, FormatError, NumericalError
from .inference import (
    ProjectionPosterior,
    Sufficients,
    elbo,
    recover_all,
    recover_patch,
    run_vb,
)
from .initkit import init_state, kmeanspp
from .model import (
    GroupPosterior,
    Hyperparameters,
    NoiseComponentPosterior,
    VariationalState,
    default_hyperparameters,
    load_state,
    sample_noisy_patches,
    save_state,
)
from .noisebench import NoiseSpec, add_noise, psnr, ssim
from .patchio import PatchSet, aggregate_patches, extract_patches, read_pgm, write_pgm

__version__ = "0.1.0"

__all__ = [
    "DimensionError", "FormatError", "NumericalError",
    "ProjectionPosterior", "Sufficients", "elbo", "recover_all", "recover_patch",
    "run_vb", "init_state", "kmeanspp",
    "GroupPosterior", "Hyperparameters", "NoiseComponentPosterior",
    "VariationalState", "default_hyperparameters", "load_state",
    "sample_noisy_patches", "save_state",
    "NoiseSpec", "add_noise", "psnr", "ssim",
    "PatchSet", "aggregate_patches", "extract_patches", "read_pgm", "write_pgm",
]
