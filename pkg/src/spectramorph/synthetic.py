"""Planted low-rank scenes with known endmembers, for demos and self-checks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .cube import DataCube


@dataclass(eq=False)
class PlantedScene:
    cube: DataCube
    endmembers: np.ndarray
    abundances: np.ndarray
    illumination: np.ndarray


def smooth_endmembers(K: int, bands: int, rng: np.random.Generator) -> np.ndarray:
    """``K x bands`` positive spectra built from a few broad Gaussian bumps each."""
    x = np.linspace(0.0, 1.0, bands)
    E = np.empty((K, bands))
    for k in range(K):
        s = 0.1 + 0.2 * rng.random()
        for _ in range(3):
            center = rng.uniform(-0.1, 1.1)
            width = rng.uniform(0.08, 0.3)
            s = s + rng.uniform(0.2, 1.0) * np.exp(-0.5 * ((x - center) / width) ** 2)
        E[k] = s
    return E / E.max()


def planted_scene(
    height: int,
    width: int,
    bands: int,
    K: int,
    seed: int = 0,
    feature_px: float = 3.0,
    sharpness: float = 6.0,
    illumination: tuple = (0.6, 1.0),
) -> PlantedScene:
    """A scene that is exactly rank ``K``: every pixel is ``illum * (a @ E)``.

    Abundances are a softmax over smoothed random fields, so materials form
    patches roughly ``feature_px`` pixels across with soft borders. A smooth
    multiplicative illumination field breaks sum-to-one. The cube is scaled so
    its maximum is 1 (no offset, which would raise the rank).
    """
    rng = np.random.default_rng(seed)
    E = smooth_endmembers(K, bands, rng)
    fields = np.stack(
        [ndimage.gaussian_filter(rng.standard_normal((height, width)), feature_px, mode="wrap")
         for _ in range(K)],
        axis=-1,
    )
    fields /= fields.std()
    logits = sharpness * fields
    A = np.exp(logits - logits.max(axis=-1, keepdims=True))
    A /= A.sum(axis=-1, keepdims=True)
    lo, hi = illumination
    light = ndimage.gaussian_filter(rng.standard_normal((height, width)), 4 * feature_px, mode="wrap")
    light = (light - light.min()) / max(light.max() - light.min(), 1e-12)
    light = lo + (hi - lo) * light
    X = light[:, :, None] * (A @ E)
    scale = X.max()
    return PlantedScene(DataCube(X / scale), E, A, light / scale)
