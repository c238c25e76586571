import math

import numpy as np
import pytest
from conftest import random_params
from hypothesis import given
from hypothesis import strategies as st

from calibnav.gaussian import sample_batch
from calibnav.metrics import ESV_LEVELS, ade_fde, bon_ade_fde, esv_from_d2, esv_report, metric_report


def _batch(rng, w=200, spread=1.0):
    return random_params(rng, (w, 12), spread)


def test_levels_grid():
    assert ESV_LEVELS.size == 100
    assert ESV_LEVELS[0] == 0.01 and ESV_LEVELS[-2] == 0.99 and ESV_LEVELS[-1] == 0.9999


def test_ade_fde_examples():
    truth = np.random.default_rng(0).normal(size=(5, 12, 2))
    params = np.zeros((5, 12, 5))
    params[..., 2:4] = 1.0
    params[..., :2] = truth
    assert ade_fde(params, truth) == (0.0, 0.0)
    params[..., 0] += 1.0
    assert ade_fde(params, truth) == pytest.approx((1.0, 1.0))
    params[..., :2] = truth
    params[..., 0] += 0.1 * np.arange(1, 13)
    ade, fde = ade_fde(params, truth)
    assert ade == pytest.approx(0.65) and fde == pytest.approx(1.2)


def test_empty_batch_rejected():
    with pytest.raises(ValueError):
        ade_fde(np.zeros((0, 12, 5)), np.zeros((0, 12, 2)))
    with pytest.raises(ValueError):
        esv_report(np.zeros((0, 12, 5)), np.zeros((0, 12, 2)))


def test_truth_at_mean_is_maximally_underconfident():
    rng = np.random.default_rng(0)
    p = _batch(rng, 10)
    r = esv_report(p, p[..., :2])
    assert r.delta_esv_1 == pytest.approx(1 - (1 - math.exp(-0.5)), abs=1e-12)
    assert r.delta_esv_1 == pytest.approx(0.6065, abs=1e-4)


def test_sampled_truth_is_calibrated():
    rng = np.random.default_rng(1)
    p = _batch(rng, 100_000 // 12 + 1)
    r = esv_report(p, sample_batch(p, rng))
    assert max(abs(r.delta_esv_1), abs(r.delta_esv_2), abs(r.delta_esv_3)) < 0.01
    assert r.mean_abs_delta_esv < 0.01


def test_calibration_at_ten_thousand_samples():
    rng = np.random.default_rng(2)
    p = _batch(rng, 10_000 // 12 + 1)
    r = esv_report(p, sample_batch(p, rng))
    assert max(abs(r.delta_esv_1), abs(r.delta_esv_2), abs(r.delta_esv_3)) < 0.03


def test_shrunk_covariance_is_overconfident():
    rng = np.random.default_rng(3)
    p = _batch(rng, 2000)
    truth = sample_batch(p, rng)
    q = p.copy()
    q[..., 2:4] /= math.sqrt(10.0)
    r = esv_report(q, truth)
    assert r.delta_esv_1 < 0 and r.delta_esv_2 < 0 and r.delta_esv_3 < 0


def test_level_table_and_mean_abs():
    rng = np.random.default_rng(4)
    p = _batch(rng, 50)
    r = esv_report(p, sample_batch(p, rng))
    assert len(r.levels) == 100
    emp = np.array([e for _, e, _ in r.levels])
    ideal = np.array([i for _, _, i in r.levels])
    assert np.all((emp >= 0) & (emp <= 1))
    assert r.mean_abs_delta_esv == pytest.approx(np.mean(np.abs(emp - ideal)))


def test_mean_abs_zero_iff_exact_coverage():
    # mid-point quantiles of 10^4 equal bands give exact coverage on the whole grid
    d2 = -2.0 * np.log1p(-(np.arange(10_000) + 0.5) / 10_000)
    assert esv_from_d2(d2).mean_abs_delta_esv == pytest.approx(0.0, abs=1e-12)
    assert esv_from_d2(d2 * 1.5).mean_abs_delta_esv > 0


@given(st.floats(-math.pi, math.pi), st.floats(-20, 20), st.floats(-20, 20))
def test_rigid_transform_invariance(angle, tx, ty):
    rng = np.random.default_rng(5)
    p = _batch(rng, 20)
    truth = sample_batch(p, rng)
    R = np.array([[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]])
    cov = np.zeros(p.shape[:-1] + (2, 2))
    cov[..., 0, 0] = p[..., 2] ** 2
    cov[..., 1, 1] = p[..., 3] ** 2
    cov[..., 0, 1] = cov[..., 1, 0] = p[..., 2] * p[..., 3] * p[..., 4]
    cov_r = R @ cov @ R.T
    q = np.empty_like(p)
    q[..., :2] = p[..., :2] @ R.T + [tx, ty]
    q[..., 2] = np.sqrt(cov_r[..., 0, 0])
    q[..., 3] = np.sqrt(cov_r[..., 1, 1])
    q[..., 4] = cov_r[..., 0, 1] / (q[..., 2] * q[..., 3])
    a = esv_report(p, truth)
    b = esv_report(q, truth @ R.T + [tx, ty])
    # thresholds hit by d2 values within rounding of a level are the only possible flips
    assert abs(a.delta_esv_1 - b.delta_esv_1) <= 1 / 240 + 1e-12
    assert abs(a.mean_abs_delta_esv - b.mean_abs_delta_esv) <= 1 / 240 + 1e-12


def test_bon_degenerate_equals_ade():
    rng = np.random.default_rng(6)
    p = _batch(rng, 30)
    p[..., 2:4] = 1e-8
    truth = rng.normal(size=(30, 12, 2))
    bon = bon_ade_fde(p, truth, 1, np.random.default_rng(0))
    np.testing.assert_allclose(bon, ade_fde(p, truth), atol=1e-6)


def test_bon_more_samples_not_worse():
    rng = np.random.default_rng(7)
    p = _batch(rng, 20)
    truth = sample_batch(p, rng)
    one = np.mean([bon_ade_fde(p, truth, 1, np.random.default_rng(s)) for s in range(100)], axis=0)
    twenty = np.mean([bon_ade_fde(p, truth, 20, np.random.default_rng(s)) for s in range(100)], axis=0)
    assert np.all(twenty <= one)


def test_bon_at_truth_within_noise_bound():
    rng = np.random.default_rng(8)
    p = _batch(rng, 20)
    n = 50
    ade, fde = bon_ade_fde(p, p[..., :2], n, np.random.default_rng(1))
    bound = 3 * np.max(np.hypot(p[..., 2], p[..., 3])) / math.sqrt(n)
    assert ade < bound and fde < bound


def test_bon_seeded_and_validated():
    rng = np.random.default_rng(9)
    p = _batch(rng, 5)
    t = sample_batch(p, rng)
    assert bon_ade_fde(p, t, 5, np.random.default_rng(3)) == bon_ade_fde(p, t, 5, np.random.default_rng(3))
    with pytest.raises(ValueError):
        bon_ade_fde(p, t, 0, rng)


def test_metric_report_row():
    rng = np.random.default_rng(10)
    p = _batch(rng, 5)
    row = metric_report(p, sample_batch(p, rng), bon_n=3)
    assert row["n_windows"] == 5 and row["bon_n"] == 3 and row["bon_ade"] is not None
    assert metric_report(p, p[..., :2])["bon_ade"] is None
