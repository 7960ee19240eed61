"""Synthetic sensor observations (Wald's protocol) and coarse spectral priors."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from .cube import DataCube, apply_srf, check_srf
from .psf import PsfKernel, make_kernel

NOISE_OFF = math.inf

# spatial factor -> LR-HSI SNR (dB)
HSI_SNR_BY_R = {4: 35.0, 8: 30.0, 16: 25.0, 32: 20.0}
MSI_SNR_DB = 40.0
R_VALUES = (4, 8, 16, 32)
C_VALUES = (1, 3, 4, 8, 16)
CSP_FACTORS = (2, 4, 8, 16)


def hsi_snr_for(r: int) -> float:
    try:
        return HSI_SNR_BY_R[r]
    except KeyError:
        raise ValueError(f"no paired HSI SNR for r={r}; set hsi_snr_db explicitly") from None


@dataclass
class DegradeConfig:
    r: int
    srf: np.ndarray
    psf: PsfKernel = field(default_factory=lambda: make_kernel("gaussian"))
    hsi_snr_db: Optional[float] = None
    msi_snr_db: float = MSI_SNR_DB
    seed: int = 0

    def __post_init__(self):
        self.srf = check_srf(self.srf)
        if self.r < 1:
            raise ValueError(f"r must be >= 1, got {self.r}")
        if self.hsi_snr_db is None:
            self.hsi_snr_db = hsi_snr_for(self.r)

    @property
    def c(self) -> int:
        return self.srf.shape[1]


def convolve_per_band(cube: DataCube, kernel: PsfKernel) -> DataCube:
    """Blur each band with symmetric-reflect boundaries, then clamp to [0, 1]."""
    half = kernel.size // 2
    if min(cube.height, cube.width) < half + 1:
        raise ValueError(
            f"{cube.height}x{cube.width} cube is smaller than the {kernel.size}x{kernel.size} kernel radius"
        )
    src = cube.values.astype(np.float64)
    out = np.empty_like(src)
    for b in range(cube.bands):
        # scipy "reflect" is the half-sample symmetric extension (d c b a | a b c d)
        out[:, :, b] = ndimage.convolve(src[:, :, b], kernel.weights, mode="reflect")
    return cube.with_values(np.clip(out, 0.0, 1.0))


def decimate(cube: DataCube, r: int) -> DataCube:
    """Keep the top-left sample of every ``r x r`` block."""
    if r < 1:
        raise ValueError(f"decimation factor must be >= 1, got {r}")
    if r > min(cube.height, cube.width):
        raise ValueError(f"factor {r} exceeds a spatial dimension of {cube.height}x{cube.width}")
    h, w = cube.height // r, cube.width // r
    return cube.with_values(cube.values[: h * r : r, : w * r : r].copy())


def band_noise(shape: tuple, sigma: float, seed: int, band: int) -> np.ndarray:
    """Zero-mean Gaussian noise for one band; the stream depends only on (seed, band)."""
    rng = np.random.default_rng([int(seed), int(band)])
    return rng.normal(0.0, sigma, size=shape)


def add_noise_snr(cube: DataCube, snr_db: float, seed: int, clip: bool = True) -> DataCube:
    """Additive white Gaussian noise at ``snr_db`` relative to each band's mean-square signal.

    ``snr_db = inf`` disables noise and returns the input unchanged.
    """
    if math.isinf(snr_db) and snr_db > 0:
        return cube
    if not math.isfinite(snr_db):
        raise ValueError(f"SNR must be finite or +inf, got {snr_db}")
    src = cube.values.astype(np.float64)
    out = np.empty_like(src)
    scale = 10.0 ** (snr_db / 10.0)
    for b in range(cube.bands):
        band = src[:, :, b]
        sigma = math.sqrt(float(np.mean(band * band)) / scale)
        out[:, :, b] = band + band_noise(band.shape, sigma, seed, b)
    if clip:
        np.clip(out, 0.0, 1.0, out=out)
    return cube.with_values(out)


def wald_generate(gt: DataCube, cfg: DegradeConfig) -> tuple[DataCube, DataCube]:
    """Blur, decimate and add noise for the LR-HSI; project and add noise for the HR-MSI."""
    if cfg.srf.shape[0] != gt.bands:
        raise ValueError(f"SRF expects {cfg.srf.shape[0]} bands, GT has {gt.bands}")
    blurred = convolve_per_band(gt, cfg.psf)
    lr_hsi = add_noise_snr(decimate(blurred, cfg.r), cfg.hsi_snr_db, cfg.seed)
    # distinct stream family for the MSI branch
    hr_msi = add_noise_snr(apply_srf(gt, cfg.srf), cfg.msi_snr_db, cfg.seed + 1_000_003)
    return lr_hsi, hr_msi


def upsample_blocks(cube: DataCube, factor: int) -> DataCube:
    """Nearest-neighbour replication of every pixel into a ``factor x factor`` block."""
    if factor < 1:
        raise ValueError(f"replication factor must be >= 1, got {factor}")
    v = np.repeat(np.repeat(cube.values, factor, axis=0), factor, axis=1)
    return cube.with_values(v)


def build_csp(lr_hsi: DataCube, s: int) -> DataCube:
    """Coarse spectral prior on the LR grid: decimate by ``s`` then replicate back.

    When ``s`` does not divide the spatial dims, the trailing rows/cols beyond the
    last full block reuse the nearest block's spectrum so the prior keeps the
    LR-HSI's spatial size.
    """
    if s < 1:
        raise ValueError(f"CSP factor must be >= 1, got {s}")
    if s > min(lr_hsi.height, lr_hsi.width):
        raise ValueError(f"CSP factor {s} exceeds LR-HSI spatial dims {lr_hsi.height}x{lr_hsi.width}")
    h, w = lr_hsi.height, lr_hsi.width
    if h % s or w % s:
        warnings.warn(
            f"CSP factor {s} does not divide {h}x{w}; trailing rows/cols reuse the last block",
            stacklevel=2,
        )
    coarse = upsample_blocks(decimate(lr_hsi, s), s).values
    pad_h, pad_w = h - coarse.shape[0], w - coarse.shape[1]
    if pad_h or pad_w:
        coarse = np.pad(coarse, ((0, pad_h), (0, pad_w), (0, 0)), mode="edge")
    return lr_hsi.with_values(coarse)


def build_inference_csp(lr_hsi: DataCube, r: int) -> DataCube:
    """Coarse spectral prior on the HR grid: every LR pixel replicated ``r x r`` times."""
    return upsample_blocks(lr_hsi, r)
