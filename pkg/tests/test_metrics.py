import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import metric_oracles as oracle
from spectramorph.cube import CropSpec, DataCube
from spectramorph.metrics import (
    MetricOptions,
    QualityReport,
    ergas,
    evaluate,
    psnr,
    rmse,
    sam,
    sam_map,
    ssim,
    uiqi,
    zero_mean_bands,
    zero_spectra,
)

pairs = st.integers(0, 2**31).map(lambda s: np.random.default_rng(s).random((2, 5, 6, 3)) + 0.01)


def _rel(a, b):
    return abs(a - b) / max(abs(b), 1e-300)


def test_identical_cubes(rng):
    x = rng.random((8, 8, 4))
    rep = evaluate(x, x.copy())
    assert rep.rmse == 0 and rep.ergas == 0
    assert rep.ssim == 1 and rep.uiqi == 1
    assert rep.sam_deg <= 0.01
    assert rep.psnr_db == math.inf


def test_random_pair_matches_oracles(rng):
    x, y = rng.random((8, 8, 4)), rng.random((8, 8, 4))
    opts = MetricOptions.for_ratio(8)
    assert _rel(rmse(x, y), oracle.rmse(x, y)) <= 1e-10
    assert _rel(psnr(x, y), oracle.psnr(x, y)) <= 1e-10
    assert _rel(ssim(x, y), oracle.ssim(x, y)) <= 1e-10
    assert _rel(uiqi(x, y), oracle.uiqi(x, y)) <= 1e-10
    assert _rel(ergas(x, y, opts), oracle.ergas(x, y, 1 / 8)) <= 1e-10
    assert _rel(sam(x, y), oracle.sam(x, y)) <= 1e-10


def test_rmse_and_psnr_examples(rng):
    x = rng.random((3, 3, 2)) * 0.5
    assert math.isclose(rmse(x, x + 0.1), 0.1, rel_tol=1e-12)
    assert math.isclose(psnr(x, x + 0.1), 20.0, rel_tol=1e-12)
    assert math.isclose(psnr(np.zeros((2, 2, 1)), np.ones((2, 2, 1))), 0.0, abs_tol=1e-12)
    assert psnr(x, x) == math.inf


def test_ssim_negative_for_inverted_content(rng):
    x = rng.random((16, 16, 2))
    assert ssim(x, 1 - x) < 0


def test_uiqi_scaled_copy(rng):
    x = rng.random((10, 10, 1)) + 0.2
    mu, var = x.mean(), x.var()
    want = (4 * 2 * var * 2 * mu * mu) / ((var + 4 * var) * (mu * mu + 4 * mu * mu))
    assert math.isclose(uiqi(x, 2 * x), want, rel_tol=1e-12)


def test_uiqi_uncorrelated_near_zero(rng):
    x = rng.random((100, 100, 1))
    y = rng.random((100, 100, 1))
    assert abs(uiqi(x, y)) < 0.1


def test_uiqi_constant_band_guard():
    c = np.full((4, 4, 1), 0.5)
    assert uiqi(c, c) == 1.0
    assert uiqi(c, np.full((4, 4, 1), 0.2)) == 0.0


def test_ergas_single_band_example():
    x = np.full((4, 4, 1), 0.5)
    y = x.copy()
    y[::2, :, 0] += 0.05
    y[1::2, :, 0] -= 0.05
    assert math.isclose(ergas(x, y, MetricOptions.for_ratio(8)), 1.25, rel_tol=1e-12)


def test_ergas_zero_mean_flagged():
    x = np.zeros((3, 3, 2))
    x[:, :, 1] = 0.5
    assert zero_mean_bands(x) == 1
    assert np.isfinite(ergas(x, x + 0.01))


def test_sam_examples(rng):
    x = np.zeros((2, 2, 2))
    y = np.zeros((2, 2, 2))
    x[..., 0] = 1.0
    y[..., 1] = 1.0
    assert math.isclose(sam(x, y), 90.0, rel_tol=1e-12)
    a, b = rng.random((4, 4, 5)), rng.random((4, 4, 5))
    assert math.isclose(sam(a, 3 * b), sam(a, b), rel_tol=1e-6)


def test_zero_spectrum_flagged():
    x = np.ones((2, 2, 3))
    y = x.copy()
    y[0, 0] = 0
    assert zero_spectra(x, y) == 1
    assert math.isclose(sam_map(x, y)[0, 0], 90.0)


def test_shape_mismatch():
    with pytest.raises(ValueError):
        rmse(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))


def test_options_validation():
    with pytest.raises(ValueError):
        MetricOptions(max_value=0)
    with pytest.raises(ValueError):
        MetricOptions(sam_eps=0)


@given(pairs)
def test_symmetry(p):
    x, y = p
    assert rmse(x, y) == rmse(y, x)
    assert math.isclose(ssim(x, y), ssim(y, x), rel_tol=1e-12)
    assert math.isclose(uiqi(x, y), uiqi(y, x), rel_tol=1e-12)


@given(pairs, st.floats(0.1, 10))
def test_sam_scale_invariance(p, alpha):
    x, y = p
    tight = MetricOptions(sam_eps=1e-300)
    assert abs(sam(x, alpha * y, tight) - sam(x, y, tight)) <= 1e-9
    # the default eps perturbs the cosine by about eps / (|x||y|)
    assert abs(sam(x, alpha * y) - sam(x, y)) <= 1e-4


@given(pairs, st.floats(0.1, 0.9))
def test_psnr_monotone(p, shrink):
    x, y = p
    closer = x + shrink * (y - x)
    assert psnr(x, closer) > psnr(x, y)


@given(pairs)
def test_ranges(p):
    x, y = p
    rep = evaluate(x, y)
    assert rep.rmse >= 0 and rep.ergas >= 0
    assert -1 <= rep.ssim <= 1 and -1 <= rep.uiqi <= 1
    assert 0 <= rep.sam_deg <= 180


def test_evaluate_region_and_composition(rng):
    x, y = rng.random((8, 6, 3)), rng.random((8, 6, 3))
    box = CropSpec(4, 0, 4, 6)
    rep = evaluate(DataCube(x), DataCube(y), region=box)
    xs, ys = x[4:], y[4:]
    assert rep.rmse == rmse(xs, ys) and rep.sam_deg == sam(xs, ys)
    assert rep.ssim == ssim(xs, ys) and rep.uiqi == uiqi(xs, ys)


def test_report_serialization():
    rep = QualityReport(0.0, math.inf, 1.0, 1.0, 0.0, 0.005, params=10, flops=20, wall_time_s=1.5)
    text = rep.to_text()
    assert "psnr_db = inf" in text and "rmse = 0.0" in text
    csv_text = rep.to_csv()
    assert "wall_time_s" not in csv_text and "inf" in csv_text
    assert "wall_time_s" in rep.to_csv(include_timing=True)
