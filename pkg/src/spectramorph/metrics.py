"""Full-reference quality metrics for reconstructed hyperspectral cubes.

SSIM and UIQI use global per-band statistics (one mean/variance/covariance per
band) and are averaged over bands. PSNR of identical cubes is ``math.inf``.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, fields
from typing import Optional, Union

import numpy as np

from .cube import CropSpec, DataCube, crop

Array = Union[np.ndarray, DataCube]


@dataclass
class MetricOptions:
    max_value: float = 1.0
    sam_eps: float = 1e-8
    sam_delta: float = 1e-9
    ergas_ratio: float = 1.0
    ergas_eps: float = 1e-12

    def __post_init__(self):
        if not self.max_value > 0:
            raise ValueError("max_value must be > 0")
        if not (self.sam_eps > 0 and self.sam_delta > 0):
            raise ValueError("sam_eps and sam_delta must be > 0")

    @classmethod
    def for_ratio(cls, r: int, **kw) -> "MetricOptions":
        """Options with the ERGAS resolution ratio set to ``1 / r``."""
        return cls(ergas_ratio=1.0 / r, **kw)


def _pair(x: Array, x_hat: Array) -> tuple[np.ndarray, np.ndarray]:
    a = x.values if isinstance(x, DataCube) else np.asarray(x)
    b = x_hat.values if isinstance(x_hat, DataCube) else np.asarray(x_hat)
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    if a.ndim == 2:
        a = a[:, :, None]
    if b.ndim == 2:
        b = b[:, :, None]
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim != 3:
        raise ValueError(f"expected H x W x C arrays, got {a.shape}")
    return a, b


def rmse(x: Array, x_hat: Array) -> float:
    a, b = _pair(x, x_hat)
    return float(np.sqrt(np.mean((b - a) ** 2)))


def psnr(x: Array, x_hat: Array, opts: Optional[MetricOptions] = None) -> float:
    """``10 log10(MAX^2 / RMSE^2)``; ``inf`` when the cubes are identical."""
    opts = opts or MetricOptions()
    e = rmse(x, x_hat)
    if e == 0:
        return math.inf
    return float(10.0 * math.log10(opts.max_value ** 2 / e ** 2))


def _band_stats(a: np.ndarray, b: np.ndarray):
    fa = a.reshape(-1, a.shape[2])
    fb = b.reshape(-1, b.shape[2])
    mu_a, mu_b = fa.mean(axis=0), fb.mean(axis=0)
    da, db = fa - mu_a, fb - mu_b
    var_a = (da * da).mean(axis=0)
    var_b = (db * db).mean(axis=0)
    cov = (da * db).mean(axis=0)
    return mu_a, mu_b, var_a, var_b, cov


def ssim(x: Array, x_hat: Array, opts: Optional[MetricOptions] = None) -> float:
    opts = opts or MetricOptions()
    a, b = _pair(x, x_hat)
    mu_a, mu_b, var_a, var_b, cov = _band_stats(a, b)
    c1 = (0.01 * opts.max_value) ** 2
    c2 = (0.03 * opts.max_value) ** 2
    per_band = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    )
    return float(per_band.mean())


def uiqi(x: Array, x_hat: Array) -> float:
    """Band-averaged universal image quality index.

    A band with zero denominator (both bands constant, or both zero-mean)
    scores 1 when the two bands are identical and 0 otherwise.
    """
    a, b = _pair(x, x_hat)
    mu_a, mu_b, var_a, var_b, cov = _band_stats(a, b)
    num = 4.0 * cov * mu_a * mu_b
    den = (var_a + var_b) * (mu_a ** 2 + mu_b ** 2)
    q = np.empty_like(num)
    ok = den > 0
    q[ok] = num[ok] / den[ok]
    for k in np.flatnonzero(~ok):
        q[k] = 1.0 if np.array_equal(a[:, :, k], b[:, :, k]) else 0.0
    return float(q.mean())


def ergas(x: Array, x_hat: Array, opts: Optional[MetricOptions] = None) -> float:
    """``100 * ratio * sqrt(mean_k(RMSE_k^2 / mu_k^2))`` with ``mu_k`` the reference band mean."""
    opts = opts or MetricOptions()
    a, b = _pair(x, x_hat)
    fa = a.reshape(-1, a.shape[2])
    fb = b.reshape(-1, b.shape[2])
    mse_k = ((fb - fa) ** 2).mean(axis=0)
    mu_k = fa.mean(axis=0)
    mu2 = np.maximum(mu_k ** 2, opts.ergas_eps)
    return float(100.0 * opts.ergas_ratio * np.sqrt(np.mean(mse_k / mu2)))


def zero_mean_bands(x: Array, opts: Optional[MetricOptions] = None) -> int:
    """Number of reference bands whose mean is small enough to trip the ERGAS guard."""
    opts = opts or MetricOptions()
    a = x.values if isinstance(x, DataCube) else np.asarray(x)
    mu = a.reshape(-1, a.shape[-1]).astype(np.float64).mean(axis=0)
    return int(np.sum(mu ** 2 < opts.ergas_eps))


def sam_map(x: Array, x_hat: Array, opts: Optional[MetricOptions] = None) -> np.ndarray:
    """Per-pixel spectral angle in degrees."""
    opts = opts or MetricOptions()
    a, b = _pair(x, x_hat)
    dot = np.sum(a * b, axis=2)
    norms = np.linalg.norm(a, axis=2) * np.linalg.norm(b, axis=2)
    cos = np.minimum(dot / (norms + opts.sam_eps), 1.0 - opts.sam_delta)
    return np.degrees(np.arccos(np.maximum(cos, -1.0)))


def sam(x: Array, x_hat: Array, opts: Optional[MetricOptions] = None) -> float:
    return float(sam_map(x, x_hat, opts).mean())


def zero_spectra(x: Array, x_hat: Array) -> int:
    """Pixels where either spectrum is all zero (their angle reads 90 degrees)."""
    a, b = _pair(x, x_hat)
    return int(np.sum((np.abs(a).sum(axis=2) == 0) | (np.abs(b).sum(axis=2) == 0)))


METRIC_NAMES = ("rmse", "psnr_db", "ssim", "uiqi", "ergas", "sam_deg")


@dataclass
class QualityReport:
    rmse: float
    psnr_db: float
    ssim: float
    uiqi: float
    ergas: float
    sam_deg: float
    params: Optional[int] = None
    flops: Optional[int] = None
    wall_time_s: Optional[float] = None
    zero_spectra: int = 0
    zero_mean_bands: int = 0

    def metrics(self) -> dict:
        return {name: getattr(self, name) for name in METRIC_NAMES}

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            lines.append(f"{f.name} = {_fmt(v)}")
        return "\n".join(lines) + "\n"

    def csv_header(self, include_timing: bool = False) -> list:
        names = list(METRIC_NAMES) + ["params", "flops", "zero_spectra", "zero_mean_bands"]
        if include_timing:
            names.append("wall_time_s")
        return names

    def csv_row(self, include_timing: bool = False) -> list:
        d = asdict(self)
        return [_fmt(d[name]) for name in self.csv_header(include_timing)]

    def to_csv(self, include_timing: bool = False) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.csv_header(include_timing))
        writer.writerow(self.csv_row(include_timing))
        return buf.getvalue()


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        if math.isinf(v):
            return "inf"
        return repr(v)
    return str(v)


def evaluate(x: Array, x_hat: Array, opts: Optional[MetricOptions] = None,
             region: Optional[CropSpec] = None) -> QualityReport:
    """All six metrics on the same region (the whole cube unless ``region`` is given)."""
    opts = opts or MetricOptions()
    a, b = _pair(x, x_hat)
    if region is not None:
        a = crop(DataCube(a), region).values
        b = crop(DataCube(b), region).values
    return QualityReport(
        rmse=rmse(a, b),
        psnr_db=psnr(a, b, opts),
        ssim=ssim(a, b, opts),
        uiqi=uiqi(a, b),
        ergas=ergas(a, b, opts),
        sam_deg=sam(a, b, opts),
        zero_spectra=zero_spectra(a, b),
        zero_mean_bands=zero_mean_bands(a, opts),
    )


def mean_absolute_error(x: Array, x_hat: Array) -> float:
    """Elementwise mean absolute difference over all ``H*W*C`` entries."""
    a, b = _pair(x, x_hat)
    return float(np.mean(np.abs(b - a)))
