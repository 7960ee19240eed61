"""Analytic 15x15 point-spread-function kernels for synthetic LR-HSI generation."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import j1

KERNEL_SIZE = 15
SIGNED_SUM_FLOOR = 1e-6

DEFAULT_PARAMS: dict[str, dict[str, float]] = {
    "gaussian": {"sigma": 2.5},
    "kolmogorov": {"r0": 3.0},
    "airy": {"radius": 3.0},
    "moffat": {"alpha": 3.0, "beta": 2.0},
    "sinc": {"width": 3.0},
    "lorentzian_squared": {"gamma": 2.0},
    "hermite": {"sigma": 2.5},
    "parabolic": {"radius": 7.0},
    "gabor": {"sigma": 2.5, "freq": 0.15},
    "delta": {},
}
KINDS = tuple(DEFAULT_PARAMS)
RADIAL_KINDS = ("gaussian", "kolmogorov", "airy", "moffat", "lorentzian_squared", "parabolic")

_ALIASES = {
    "lorentziansquared": "lorentzian_squared",
    "lorentzian-squared": "lorentzian_squared",
    "lorentzian2": "lorentzian_squared",
}


@dataclass(frozen=True, eq=False)
class PsfKernel:
    kind: str
    weights: np.ndarray
    params: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return self.weights.shape[0]


def canonical_kind(kind: str) -> str:
    k = kind.strip().lower().replace(" ", "_")
    k = _ALIASES.get(k, k)
    if k not in DEFAULT_PARAMS:
        raise ValueError(f"unknown PSF kind {kind!r}; choose from {', '.join(KINDS)}")
    return k


def _positive(params: dict, *names: str) -> None:
    for name in names:
        if not params[name] > 0:
            raise ValueError(f"PSF parameter {name} must be > 0, got {params[name]}")


def _raw_kernel(kind: str, p: dict, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    r2 = u * u + v * v
    r = np.sqrt(r2)
    if kind == "gaussian":
        _positive(p, "sigma")
        return np.exp(-r2 / (2.0 * p["sigma"] ** 2))
    if kind == "kolmogorov":
        # long-exposure atmospheric transfer form used as a spatial profile
        _positive(p, "r0")
        return np.exp(-3.44 * (r / p["r0"]) ** (5.0 / 3.0))
    if kind == "airy":
        _positive(p, "radius")
        x = np.pi * r / p["radius"]
        out = np.ones_like(x)
        nz = x > 0
        out[nz] = (2.0 * j1(x[nz]) / x[nz]) ** 2
        return out
    if kind == "moffat":
        _positive(p, "alpha")
        if not p["beta"] > 1:
            raise ValueError(f"Moffat beta must be > 1, got {p['beta']}")
        return (1.0 + r2 / p["alpha"] ** 2) ** (-p["beta"])
    if kind == "sinc":
        _positive(p, "width")
        return np.sinc(u / p["width"]) * np.sinc(v / p["width"])
    if kind == "lorentzian_squared":
        _positive(p, "gamma")
        return (1.0 / (1.0 + r2 / p["gamma"] ** 2)) ** 2
    if kind == "hermite":
        _positive(p, "sigma")
        s = p["sigma"]
        h2 = lambda t: 4.0 * t * t - 2.0  # noqa: E731  physicists' H2
        return h2(u / s) * h2(v / s) * np.exp(-r2 / (2.0 * s * s))
    if kind == "parabolic":
        _positive(p, "radius")
        return np.maximum(0.0, 1.0 - r2 / p["radius"] ** 2)
    if kind == "gabor":
        _positive(p, "sigma")
        return np.exp(-r2 / (2.0 * p["sigma"] ** 2)) * np.cos(2.0 * np.pi * p["freq"] * u)
    if kind == "delta":
        return (r2 == 0).astype(np.float64)
    raise AssertionError(kind)


def make_kernel(kind: str, params: Optional[dict] = None, size: int = KERNEL_SIZE) -> PsfKernel:
    """Evaluate a PSF family on the integer grid centered at ``size // 2``.

    Unspecified parameters take the family defaults in :data:`DEFAULT_PARAMS`.
    The kernel is divided by its algebraic sum; signed families whose sum is
    within :data:`SIGNED_SUM_FLOOR` of zero are rejected.
    """
    kind = canonical_kind(kind)
    if size < 1 or size % 2 == 0:
        raise ValueError(f"kernel size must be odd and positive, got {size}")
    p = dict(DEFAULT_PARAMS[kind])
    for key, value in (params or {}).items():
        if key not in p:
            raise ValueError(f"{kind} PSF has no parameter {key!r}")
        p[key] = float(value)
    half = size // 2
    # v varies along rows, u along columns
    v, u = np.mgrid[-half : half + 1, -half : half + 1].astype(np.float64)
    raw = _raw_kernel(kind, p, u, v)
    total = raw.sum()
    if abs(total) < SIGNED_SUM_FLOOR:
        raise ValueError(f"{kind} kernel sums to {total:.3g}; cannot normalize to unit DC gain")
    return PsfKernel(kind, raw / total, p)


def save_kernel_csv(kernel: PsfKernel, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerows([[repr(float(x)) for x in row] for row in kernel.weights])


def load_kernel_csv(path, kind: str = "custom") -> PsfKernel:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [[float(x) for x in r] for r in csv.reader(fh) if r]
    w = np.array(rows, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] != w.shape[1] or w.shape[0] % 2 == 0:
        raise ValueError(f"{path}: kernel must be square with odd size")
    return PsfKernel(kind, w, {})
