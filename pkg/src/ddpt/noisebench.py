"""Synthetic noise generators and image-quality metrics.

Noise families: homogeneous Gaussian (sigma), intensity-dependent
heterogeneous Gaussian (per-pixel sigma = intensity / b), Laplace (sigma
interpreted as standard deviation by default), uniform on [-a, a], and the
four-quadrant combination of all of them.  Each family draws from its own
counter-based stream, so fields are independent of iteration order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate

from .errors import DimensionError
from .nonparametrics import rng_from_seed

KINDS = ("gaussian", "heterogeneous", "laplace", "uniform", "combined")

# quadrant layout of the combined family: (kind, level) for
# upper-left, upper-right, lower-left, lower-right
COMBINED_QUADRANTS = (
    ("heterogeneous", 4.0),
    ("laplace", 30.0),
    ("gaussian", 30.0),
    ("uniform", 30.0),
)

PSNR_CAP_DB = 99.0

_STREAM = {"gaussian": 1, "heterogeneous": 2, "laplace": 3, "uniform": 4}


@dataclass
class NoiseSpec:
    """One noise family with its level, seed, and clipping behavior.

    ``level`` is sigma for the Gaussian and Laplace families, b for the
    heterogeneous family and a for the uniform family; it is ignored for
    ``combined``.  ``laplace_scale_param`` switches the Laplace level from
    standard deviation (default) to the raw scale parameter.
    """

    kind: str
    level: float = 0.0
    seed: int = 0
    clip: bool = True
    laplace_scale_param: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.kind != "combined" and self.level <= 0:
            raise ValueError("noise level must be positive")


def _field(kind: str, level: float, image: np.ndarray, rng: np.random.Generator,
           laplace_scale_param: bool) -> np.ndarray:
    shape = image.shape
    if kind == "gaussian":
        return rng.normal(0.0, level, size=shape)
    if kind == "heterogeneous":
        return rng.standard_normal(shape) * (image / level)
    if kind == "laplace":
        scale = level if laplace_scale_param else level / math.sqrt(2.0)
        return rng.laplace(0.0, scale, size=shape)
    if kind == "uniform":
        return rng.uniform(-level, level, size=shape)
    raise ValueError(kind)


def add_noise(image: np.ndarray, spec: NoiseSpec) -> np.ndarray:
    """Add zero-mean noise of the requested family; clip to [0, 255] if asked."""
    image = np.asarray(image, dtype=float)
    if spec.kind == "combined":
        h, w = image.shape
        rh, cw = math.ceil(h / 2), math.ceil(w / 2)
        slices = (
            (slice(0, rh), slice(0, cw)),
            (slice(0, rh), slice(cw, w)),
            (slice(rh, h), slice(0, cw)),
            (slice(rh, h), slice(cw, w)),
        )
        out = image.copy()
        for quadrant, ((kind, level), (rows, cols)) in enumerate(
                zip(COMBINED_QUADRANTS, slices)):
            rng = rng_from_seed(spec.seed, 10 + quadrant)
            out[rows, cols] += _field(kind, level, image[rows, cols], rng,
                                      spec.laplace_scale_param)
    else:
        rng = rng_from_seed(spec.seed, _STREAM[spec.kind])
        out = image + _field(spec.kind, spec.level, image, rng, spec.laplace_scale_param)
    if spec.clip:
        out = np.clip(out, 0.0, 255.0)
    return out


def psnr(reference: np.ndarray, test: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB; identical images return the 99 dB cap."""
    reference = np.asarray(reference, dtype=float)
    test = np.asarray(test, dtype=float)
    if reference.shape != test.shape:
        raise DimensionError("images differ in shape")
    mse = float(np.mean((reference - test) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return 10.0 * math.log10(255.0 ** 2 / mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = size // 2
    g = np.exp(-0.5 * (np.arange(-half, half + 1) / sigma) ** 2)
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def ssim(reference: np.ndarray, test: np.ndarray) -> float:
    """Mean structural similarity with an 11x11 Gaussian window (sigma 1.5).

    Uses the canonical constants C1 = (0.01*255)^2 and C2 = (0.03*255)^2;
    the local map is averaged over pixels whose window lies fully inside the
    image.
    """
    x = np.asarray(reference, dtype=float)
    y = np.asarray(test, dtype=float)
    if x.shape != y.shape:
        raise DimensionError("images differ in shape")
    if min(x.shape) < 11:
        raise DimensionError("images must be at least 11 pixels per side")
    kernel = _gaussian_window()
    pad = kernel.shape[0] // 2

    def win_mean(img):
        return correlate(img, kernel, mode="nearest")

    ux, uy = win_mean(x), win_mean(y)
    uxx, uyy, uxy = win_mean(x * x), win_mean(y * y), win_mean(x * y)
    vx = uxx - ux * ux
    vy = uyy - uy * uy
    vxy = uxy - ux * uy
    c1 = (0.01 * 255.0) ** 2
    c2 = (0.03 * 255.0) ** 2
    num = (2.0 * ux * uy + c1) * (2.0 * vxy + c2)
    den = (ux * ux + uy * uy + c1) * (vx + vy + c2)
    smap = num / den
    interior = smap[pad:-pad, pad:-pad]
    return float(interior.mean())


def format_metric_line(name: str, psnr_db: float, ssim_value: float) -> str:
    """One UTF-8 TSV report line: image, PSNR in dB, SSIM."""
    return f"{name}\t{psnr_db:.6f}\t{ssim_value:.6f}"
