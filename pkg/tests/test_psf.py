import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from spectramorph.psf import (
    KINDS,
    RADIAL_KINDS,
    load_kernel_csv,
    make_kernel,
    save_kernel_csv,
)


@pytest.mark.parametrize("kind", KINDS)
def test_every_kind_sums_to_one(kind):
    k = make_kernel(kind)
    assert k.weights.shape == (15, 15)
    assert abs(k.weights.sum() - 1.0) <= 1e-12


@pytest.mark.parametrize("kind", RADIAL_KINDS)
def test_radial_kernels_mirror_exactly(kind):
    w = make_kernel(kind).weights
    assert np.array_equal(w, w[::-1, :])
    assert np.array_equal(w, w[:, ::-1])


def test_delta():
    w = make_kernel("delta").weights
    assert w[7, 7] == 1.0
    assert np.count_nonzero(w) == 1


def test_gaussian_shape():
    w = make_kernel("gaussian", {"sigma": 2.5}).weights
    assert np.array_equal(w, w.T)
    assert np.unravel_index(np.argmax(w), w.shape) == (7, 7)


def test_moffat_center_corner_ratio():
    alpha, beta = 3.0, 2.0
    w = make_kernel("moffat", {"alpha": alpha, "beta": beta}).weights

    def moffat(r2):
        return (1.0 + r2 / alpha ** 2) ** (-beta)

    expected = moffat(7.0 ** 2 + 7.0 ** 2) / moffat(0.0)
    assert math.isclose(w[0, 0] / w[7, 7], expected, rel_tol=1e-12)


def test_airy_center_limit():
    w = make_kernel("airy").weights
    assert np.isfinite(w).all() and np.argmax(w) == 7 * 15 + 7


def test_invalid_params():
    with pytest.raises(ValueError):
        make_kernel("gaussian", {"sigma": 0.0})
    with pytest.raises(ValueError):
        make_kernel("moffat", {"alpha": 3.0, "beta": 1.0})
    with pytest.raises(ValueError):
        make_kernel("nope")


def test_signed_kernel_with_vanishing_sum_rejected():
    # root of the grid sum in the carrier frequency, located by bisection
    from scipy.optimize import brentq

    def total(f):
        u = np.arange(-7, 8, dtype=float)
        g = np.exp(-u * u / (2 * 2.5 ** 2))
        return float((g * np.cos(2 * np.pi * f * u)).sum() * g.sum())

    root = brentq(total, 0.2, 0.25, xtol=1e-15)
    with pytest.raises(ValueError):
        make_kernel("gabor", {"sigma": 2.5, "freq": root})


def test_deterministic_and_csv_round_trip(tmp_path):
    a, b = make_kernel("hermite"), make_kernel("hermite")
    assert np.array_equal(a.weights, b.weights)
    save_kernel_csv(a, tmp_path / "k.csv")
    assert np.array_equal(load_kernel_csv(tmp_path / "k.csv").weights, a.weights)


@given(st.floats(0.5, 6.0))
def test_gaussian_sigma_property(sigma):
    w = make_kernel("gaussian", {"sigma": sigma}).weights
    assert abs(w.sum() - 1) <= 1e-12
    assert (w > 0).all()
    assert np.array_equal(w, w[::-1, ::-1])
