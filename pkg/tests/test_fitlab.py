import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from entlab.fitlab import (
    FitResult,
    fit_exponential,
    fit_loglinear_coeffs,
    fit_prefix,
    predict_performance,
    read_curve,
)


def _curve(a, b, h):
    return -a * np.exp(np.asarray(h, dtype=float)) + b


class TestFitExponential:
    def test_noiseless_recovery(self):
        h = [0.0, 0.5, 1.0]
        fit = fit_exponential(h, _curve(0.2, 0.9, h))
        assert abs(fit.a - 0.2) <= 1e-10 and abs(fit.b - 0.9) <= 1e-10
        assert fit.ceiling == fit.b - fit.a
        assert fit.ceiling == pytest.approx(0.7, abs=1e-10)
        assert fit.rmse <= 1e-12 and fit.n_points == 3

    def test_two_point_solve(self):
        fit = fit_exponential([0.0, math.log(2)], [0.7, 0.5])
        assert fit.a == pytest.approx(0.2, abs=1e-14)
        assert fit.b == pytest.approx(0.9, abs=1e-14)

    def test_shift_changes_intercept_only(self):
        rng = np.random.default_rng(0)
        h = rng.uniform(0, 2, 30)
        r = _curve(0.3, 1.0, h) + rng.normal(0, 0.01, 30)
        f0, f1 = fit_exponential(h, r), fit_exponential(h, r + 0.25)
        assert f1.a == pytest.approx(f0.a, abs=1e-12)
        assert f1.b - f0.b == pytest.approx(0.25, abs=1e-12)
        assert f1.ceiling - f0.ceiling == pytest.approx(0.25, abs=1e-12)

    def test_rank_deficient(self):
        with pytest.raises(ValueError, match="rank"):
            fit_exponential([0.5, 0.5, 0.5], [0.1, 0.2, 0.3])

    def test_too_few(self):
        with pytest.raises(ValueError):
            fit_exponential([0.5], [0.1])

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10_000))
    def test_permutation_invariant(self, seed):
        rng = np.random.default_rng(seed)
        h = rng.uniform(0, 2, 20)
        r = rng.uniform(0, 1, 20)
        perm = rng.permutation(20)
        a, b = fit_exponential(h, r), fit_exponential(h[perm], r[perm])
        assert a == b

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10_000))
    def test_residuals_orthogonal(self, seed):
        rng = np.random.default_rng(seed)
        h = rng.uniform(0, 2, 25)
        r = rng.uniform(0, 1, 25)
        fit = fit_exponential(h, r)
        u = np.exp(h)
        res = r - predict_performance(fit, h)
        assert abs(res @ u) <= 1e-9 and abs(res.sum()) <= 1e-9

    def test_json_round_trip(self):
        fit = fit_exponential([0.0, 1.0, 2.0], [0.8, 0.5, 0.1])
        back = FitResult.from_json(fit.to_json())
        assert back == fit
        assert '"ceiling"' in fit.to_json()


class TestPredict:
    def test_zero_entropy_is_ceiling(self):
        fit = FitResult(0.2, 0.9, 0.0, 3)
        assert predict_performance(fit, [0.0])[0] == pytest.approx(fit.ceiling, abs=1e-15)

    def test_own_points_rmse(self):
        rng = np.random.default_rng(1)
        h = rng.uniform(0, 1.5, 40)
        r = _curve(0.2, 0.9, h) + rng.normal(0, 0.02, 40)
        fit = fit_exponential(h, r)
        _, rmse = predict_performance(fit, h, r)
        assert rmse == pytest.approx(fit.rmse, abs=1e-15)

    def test_endpoints_bracket_observed(self):
        rng = np.random.default_rng(2)
        h = np.linspace(1.3, 0.05, 100)
        r = _curve(0.3, 1.0, h) + rng.normal(0, 0.005, 100)
        fit = fit_exponential(h, r)
        assert fit.rmse < np.ptp(r) / 10
        lo, hi = predict_performance(fit, [h.max(), h.min()])
        assert lo <= np.median(r) <= hi


class TestFitPrefix:
    def test_noisy_run_heldout(self):
        sigma = 0.01
        fails = 0
        for seed in range(50):
            rng = np.random.default_rng(seed)
            steps = np.arange(300)
            h = 1.3 * np.exp(-steps / 40.0) + 0.02
            r = _curve(0.25, 0.95, h) + rng.normal(0, sigma, 300)
            _, _, rmse = fit_prefix(h, r, 0.15)
            fails += rmse > 2 * sigma
        assert fails == 0

    def test_full_fraction_matches_fit(self):
        h = np.linspace(1, 0, 20)
        r = _curve(0.2, 0.9, h) + np.sin(np.arange(20)) * 0.01
        fit, _, rmse = fit_prefix(h, r, 1.0)
        assert rmse == pytest.approx(fit.rmse, abs=1e-15)

    def test_bad_fraction(self):
        with pytest.raises(ValueError):
            fit_prefix([0.0, 1.0], [0.0, 1.0], 0.0)


class TestLogLinear:
    def test_two_points(self):
        f = fit_loglinear_coeffs([1.0, math.e], [0.0, 1.0])
        assert f.slope == pytest.approx(1.0, abs=1e-14)
        assert f.intercept == pytest.approx(0.0, abs=1e-14)

    def test_constant(self):
        assert fit_loglinear_coeffs([1.0, 2.0, 8.0], [0.4] * 3).slope == pytest.approx(0.0, abs=1e-15)

    def test_three_points(self):
        s = np.array([0.5, 7.0, 72.0])
        f = fit_loglinear_coeffs(s, 0.3 * np.log(s) + 0.1)
        assert abs(f.slope - 0.3) <= 1e-10 and abs(f.intercept - 0.1) <= 1e-10
        assert f.predict(32.0) == pytest.approx(0.3 * math.log(32) + 0.1, abs=1e-10)

    def test_errors(self):
        with pytest.raises(ValueError):
            fit_loglinear_coeffs([0.0, 1.0], [1.0, 2.0])
        with pytest.raises(ValueError):
            fit_loglinear_coeffs([2.0, 2.0], [1.0, 2.0])
        with pytest.raises(ValueError):
            fit_loglinear_coeffs([1.0, 2.0], [1.0, 2.0]).predict(-1)


class TestReadCurve:
    def test_minimal(self, tmp_path):
        p = tmp_path / "c.csv"
        p.write_text("entropy,val_reward\n1.0,0.1\n0.5,0.4\n")
        steps, h, r = read_curve(p)
        np.testing.assert_array_equal(steps, [0, 1])
        np.testing.assert_array_equal(h, [1.0, 0.5])
        np.testing.assert_array_equal(r, [0.1, 0.4])

    def test_steps_schema(self, tmp_path):
        p = tmp_path / "steps.csv"
        p.write_text("step,entropy,cov_mean,train_acc,val_reward,resp_len,cov_easy,cov_mid,cov_hard\n5,1.2,0.1,0.5,0.25,4.0,nan,nan,nan\n")
        steps, h, r = read_curve(p)
        assert steps.tolist() == [5] and h.tolist() == [1.2] and r.tolist() == [0.25]

    @pytest.mark.parametrize(
        "text",
        ["entropy\n1.0\n", "entropy,val_reward\n1.0\n", "entropy,val_reward\n1.0,x\n", "entropy,val_reward\nnan,0.1\n", ""],
    )
    def test_strict(self, tmp_path, text):
        p = tmp_path / "bad.csv"
        p.write_text(text)
        with pytest.raises(ValueError):
            read_curve(p)
