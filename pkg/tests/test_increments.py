import math
from fractions import Fraction

import numpy as np
import pytest
from scipy import integrate, stats

from urnrace.errors import NumericRangeError, UnsupportedFamilyError
from urnrace.increments import (
    FeedbackFunction,
    WaitingTimeModel,
    analytic_D,
    make_exponential_model,
    parse_feedback,
    parse_model,
    sample_increment,
    symmetrized_sampler,
)


class TestFeedbackFunction:
    def test_power_offset_keeps_origin_positive(self):
        f = FeedbackFunction.power(2)
        assert f(0) == 1.0
        assert f(4) == 25.0

    def test_power_negative_exponent(self):
        f = FeedbackFunction.power(-1)
        assert f(0) == 1.0
        assert f(3) == 0.25

    def test_constant(self):
        f = FeedbackFunction.constant(2.5)
        assert f(0) == f(100) == 2.5
        with pytest.raises(ValueError):
            FeedbackFunction.constant(0.0)
        with pytest.raises(ValueError):
            FeedbackFunction.constant(-1.0)

    def test_tabulated_repeat_last(self):
        f = FeedbackFunction.tabulated([2, 3])
        assert [f(m) for m in range(5)] == [2.0, 3.0, 3.0, 3.0, 3.0]

    def test_tabulated_power_extrapolate(self):
        # last two entries (2, 8) at counts (0, 1) fit exponent 2, so the
        # tail continues as 8 * ((m+1)/2)**2
        f = FeedbackFunction.tabulated([2, 8], tail="power-extrapolate")
        assert f(1) == 8.0
        assert f(2) == pytest.approx(18.0, rel=1e-12)
        assert f(3) == pytest.approx(32.0, rel=1e-12)

    def test_tabulated_validation(self):
        with pytest.raises(ValueError):
            FeedbackFunction.tabulated([])
        with pytest.raises(ValueError):
            FeedbackFunction.tabulated([1.0, 0.0])
        with pytest.raises(ValueError):
            FeedbackFunction.tabulated([1.0], tail="power-extrapolate")
        with pytest.raises(ValueError):
            FeedbackFunction.tabulated([1.0, 2.0], tail="linear")

    def test_custom_positivity_enforced(self):
        f = FeedbackFunction.custom(lambda m: m - 1)
        with pytest.raises(ValueError):
            f(0)
        assert f(2) == 1.0

    def test_custom_overflow_is_numeric_range_error(self):
        f = FeedbackFunction.custom(lambda m: float("inf") if m else 1.0)
        assert f(0) == 1.0
        with pytest.raises(NumericRangeError):
            f(1)

    def test_power_overflow(self):
        f = FeedbackFunction.power(500.0)
        with pytest.raises(NumericRangeError):
            f(10 ** 6)

    def test_memoization_computes_each_count_once(self):
        calls = []
        f = FeedbackFunction.custom(lambda m: calls.append(m) or float(m + 1))
        for _ in range(3):
            assert f(5) == 6.0
        assert calls.count(5) == 1

    def test_memo_cap_recomputes_beyond_cap(self):
        calls = []
        f = FeedbackFunction.custom(lambda m: calls.append(m) or float(m + 1),
                                    memo_cap=4)
        f(10), f(10)
        assert calls.count(10) == 2  # beyond the cap nothing is cached
        f(2), f(2)
        assert calls.count(2) == 1

    def test_values_upto_matches_scalar_calls(self):
        f = FeedbackFunction.power(0.7)
        table = f.values_upto(50)
        assert table[:50] == [f(m) for m in range(50)]

    def test_weights_array_matches_scalar(self):
        f = FeedbackFunction.tabulated([2, 3, 5], tail="power-extrapolate")
        arr = f.weights_array(40)
        assert arr.tolist() == [f(m) for m in range(40)]

    def test_log_value_consistent(self):
        for f in [FeedbackFunction.power(1.3), FeedbackFunction.constant(4),
                  FeedbackFunction.tabulated([2, 3], tail="repeat-last"),
                  FeedbackFunction.tabulated([2, 8], tail="power-extrapolate")]:
            for m in [0, 1, 5, 17]:
                assert f.log_value(m) == pytest.approx(math.log(f(m)), rel=1e-12)

    def test_exact_values(self):
        assert FeedbackFunction.power(2).exact(4) == Fraction(25)
        assert FeedbackFunction.power(-2).exact(1) == Fraction(1, 4)
        assert FeedbackFunction.power(0.5).exact(4) is None
        assert FeedbackFunction.constant(3).exact(9) == Fraction(3)
        assert FeedbackFunction.constant(3.5).exact(9) is None
        assert FeedbackFunction.tabulated([2, 3]).exact(7) == Fraction(3)

    def test_parse_round_trip(self):
        for text in ["power:0.4", "const:2", "table:2,3;tail=repeat",
                     "table:2,8;tail=extrapolate"]:
            f = parse_feedback(text)
            again = parse_feedback(f.spec_string())
            assert [f(m) for m in range(6)] == [again(m) for m in range(6)]

    def test_parse_errors(self):
        for bad in ["power", "nope:3", "table:1;tail=linear", "power:abc"]:
            with pytest.raises(ValueError):
                parse_feedback(bad)


class TestWaitingTimeModel:
    def test_level_zero_rejected(self):
        model = WaitingTimeModel.deterministic_uniform(1.0, 0.0)
        with pytest.raises(ValueError):
            sample_increment(model, 0, np.random.default_rng(0))

    def test_degenerate_jitter_is_exact(self):
        model = WaitingTimeModel.deterministic_uniform(1.0, 0.0)
        assert sample_increment(model, 3, np.random.default_rng(0)) == 1.0

    def test_sampling_is_deterministic_given_state(self):
        f = FeedbackFunction.constant(1.0)
        for model in [make_exponential_model(f),
                      WaitingTimeModel.deterministic_uniform(0.5, 2.0),
                      WaitingTimeModel.gamma(2.0, f),
                      WaitingTimeModel.empirical([0.5, 1.0, 2.5])]:
            a = [sample_increment(model, 5, np.random.default_rng(42)) for _ in range(2)]
            assert a[0] == a[1]

    def test_exponential_rates_follow_feedback(self):
        model = make_exponential_model(FeedbackFunction.power(1))
        assert [model.rate(j) for j in (1, 2, 5)] == [1.0, 2.0, 5.0]
        model = make_exponential_model(FeedbackFunction.tabulated([2, 3]))
        assert [model.rate(j) for j in (1, 2, 3)] == [2.0, 3.0, 3.0]

    def test_rate_overflow(self):
        model = make_exponential_model(FeedbackFunction.power(500.0))
        with pytest.raises(NumericRangeError):
            sample_increment(model, 10 ** 6 + 1, np.random.default_rng(0))

    def test_samples_nonnegative_finite(self):
        f = FeedbackFunction.power(0.5)
        rng = np.random.default_rng(7)
        for model in [make_exponential_model(f),
                      WaitingTimeModel.deterministic_uniform(0.0, 1.0),
                      WaitingTimeModel.gamma(0.7, f),
                      WaitingTimeModel.empirical([0.0, 1.0])]:
            draws = model.sample_many(3, 1000, rng)
            assert np.all(draws >= 0) and np.all(np.isfinite(draws))

    def test_exponential_mean_large_sample(self):
        # rate at level 10 is f(9) = 100, so the mean wait is 0.01
        model = make_exponential_model(FeedbackFunction.power(2))
        draws = model.sample_many(10, 10 ** 6, np.random.default_rng(2024))
        se = 0.01 / math.sqrt(10 ** 6)
        assert abs(draws.mean() - 0.01) < 3 * se

    def test_analytic_moments(self):
        f = FeedbackFunction.power(1)
        assert make_exponential_model(f).mean(4) == 0.25
        assert make_exponential_model(f).variance(4) == 0.0625
        du = WaitingTimeModel.deterministic_uniform(1.0, 3.0)
        assert du.mean(1) == 2.5
        assert du.variance(1) == 0.75
        gm = WaitingTimeModel.gamma(2.0, f)
        assert gm.mean(4) == 0.5
        emp = WaitingTimeModel.empirical([1.0, 3.0])
        assert emp.mean(1) == 2.0 and emp.variance(1) == 1.0

    def test_model_validation(self):
        f = FeedbackFunction.constant(1.0)
        with pytest.raises(ValueError):
            WaitingTimeModel.deterministic_uniform(-1.0, 0.0)
        with pytest.raises(ValueError):
            WaitingTimeModel.gamma(0.0, f)
        with pytest.raises(ValueError):
            WaitingTimeModel.empirical([])
        with pytest.raises(ValueError):
            WaitingTimeModel.empirical([1.0, -2.0])
        with pytest.raises(ValueError):
            WaitingTimeModel.exponential(None)

    def test_parse_model(self):
        f = FeedbackFunction.constant(2.0)
        assert parse_model("exponential", feedback=f).family == "exponential"
        m = parse_model("detuniform:base=1,jitter=0.5")
        assert (m.base, m.jitter) == (1.0, 0.5)
        m = parse_model("gamma:shape=2", feedback=f)
        assert m.shape == 2.0
        m = parse_model("empirical:1,2,3")
        assert m.values == (1.0, 2.0, 3.0)
        with pytest.raises(ValueError):
            parse_model("exponential")  # needs a feedback
        with pytest.raises(ValueError):
            parse_model("weibull:shape=1")
        with pytest.raises(ValueError):
            parse_model("detuniform:base=1,scale=2")


class TestSymmetrizedIncrement:
    def test_degenerate_difference_is_zero(self):
        model = WaitingTimeModel.deterministic_uniform(1.0, 0.0)
        s = symmetrized_sampler(model, 3)
        assert s.sample(np.random.default_rng(0)) == 0.0

    def test_sign_statistic_symmetric(self):
        rng = np.random.default_rng(11)
        n = 10 ** 6
        for model in [make_exponential_model(FeedbackFunction.constant(1.0)),
                      WaitingTimeModel.gamma(2.0, FeedbackFunction.constant(1.0)),
                      WaitingTimeModel.empirical([0.5, 1.0, 4.0])]:
            draws = symmetrized_sampler(model, 1).sample_many(n, rng)
            frac_positive = np.mean(draws > 0)
            frac_negative = np.mean(draws < 0)
            # P(>0) = P(<0) by symmetry; compare the two directly
            assert abs(frac_positive - frac_negative) < 3 * math.sqrt(0.25 / n)

    def test_exponential_difference_median_near_zero(self):
        # the difference of two exponentials has a two-sided exponential law;
        # the sample median concentrates at 0 with sd ~ 1/(rate sqrt(n))
        rng = np.random.default_rng(12)
        n = 10 ** 6
        draws = symmetrized_sampler(
            make_exponential_model(FeedbackFunction.constant(1.0)), 1).sample_many(n, rng)
        assert abs(np.median(draws)) < 3.0 / math.sqrt(n)

    def test_level_validation(self):
        with pytest.raises(ValueError):
            symmetrized_sampler(WaitingTimeModel.deterministic_uniform(1.0), 0)


def _quadrature_D(pdf, lam, lo, hi):
    """Independent oracle: integrate the dispersion integrand against a density."""
    second, _ = integrate.quad(lambda z: z * z * pdf(z), max(lo, -lam), min(hi, lam),
                               epsabs=1e-14, epsrel=1e-12)
    left, _ = integrate.quad(pdf, lo, -lam, epsabs=1e-14, epsrel=1e-12)
    right, _ = integrate.quad(pdf, lam, hi, epsabs=1e-14, epsrel=1e-12)
    return second / lam ** 2 + left + right


class TestAnalyticD:
    def test_degenerate_model_is_zero(self):
        model = WaitingTimeModel.deterministic_uniform(1.0, 0.0)
        for lam in (0.1, 1.0, 10.0):
            assert analytic_D(model, 1, lam) == 0.0

    def test_exponential_matches_quadrature_oracle(self):
        # oracle computed from the two-sided exponential density; it froze to
        # 0.5284822353142307 (= 2 - 4/e) before the closed form was written
        pdf = lambda z: 0.5 * math.exp(-abs(z))
        oracle = _quadrature_D(pdf, 1.0, -np.inf, np.inf)
        assert oracle == pytest.approx(0.5284822353142307, abs=1e-12)
        model = make_exponential_model(FeedbackFunction.constant(1.0))
        assert analytic_D(model, 1, 1.0) == pytest.approx(oracle, abs=1e-6)

    @pytest.mark.parametrize("rate,lam", [(0.5, 0.1), (1.0, 1.0), (3.0, 2.5),
                                          (1e-4, 1.0), (200.0, 1.0)])
    def test_exponential_quadrature_grid(self, rate, lam):
        pdf = lambda z: 0.5 * rate * math.exp(-rate * abs(z))
        oracle = _quadrature_D(pdf, lam, -np.inf, np.inf)
        model = make_exponential_model(FeedbackFunction.constant(rate))
        assert analytic_D(model, 1, lam) == pytest.approx(oracle, rel=1e-8)

    def test_bounded_support_reduces_to_second_moment(self):
        # |X^s| <= jitter, so with lam >= jitter the tail vanishes and
        # D = E[(X^s)^2] / lam^2 = jitter^2 / (6 lam^2) exactly
        model = WaitingTimeModel.deterministic_uniform(0.3, 1.0)
        assert analytic_D(model, 1, 2.0) == pytest.approx(1.0 / 24.0, rel=1e-12)
        assert analytic_D(model, 1, 1.0) == pytest.approx(1.0 / 6.0, rel=1e-12)

    def test_triangular_matches_quadrature(self):
        j = 1.7
        pdf = lambda z: max(0.0, (j - abs(z)) / (j * j))
        model = WaitingTimeModel.deterministic_uniform(0.0, j)
        for lam in (0.4, 1.0, 1.7, 5.0):
            oracle = _quadrature_D(pdf, lam, -j, j)
            assert analytic_D(model, 1, lam) == pytest.approx(oracle, rel=1e-9)

    def test_gamma_shape_one_equals_exponential(self):
        f = FeedbackFunction.power(1)
        expo = make_exponential_model(f)
        gam = WaitingTimeModel.gamma(1.0, f)
        for level, lam in [(1, 0.5), (3, 1.0), (5, 4.0)]:
            assert analytic_D(gam, level, lam) == pytest.approx(
                analytic_D(expo, level, lam), rel=1e-7)

    def test_empirical_exact_enumeration(self):
        values = [0.0, 1.0, 3.0]
        model = WaitingTimeModel.empirical(values)
        diffs = [a - b for a in values for b in values]
        for lam in (0.5, 1.0, 2.0, 3.0):
            expected = (sum(d * d for d in diffs if abs(d) <= lam) / len(diffs) / lam ** 2
                        + sum(1 for d in diffs if abs(d) >= lam) / len(diffs))
            assert analytic_D(model, 1, lam) == pytest.approx(expected, rel=1e-12)

    def test_lambda_validation(self):
        model = WaitingTimeModel.deterministic_uniform(1.0, 0.0)
        for lam in (0.0, -1.0, math.inf):
            with pytest.raises(ValueError):
                analytic_D(model, 1, lam)

    def test_nonnegative_everywhere(self):
        rng = np.random.default_rng(3)
        f = FeedbackFunction.power(0.3)
        models = [make_exponential_model(f),
                  WaitingTimeModel.deterministic_uniform(0.1, 0.7),
                  WaitingTimeModel.gamma(1.5, f),
                  WaitingTimeModel.empirical(rng.random(5).tolist())]
        for model in models:
            for lam in (0.1, 1.0, 10.0):
                assert analytic_D(model, 2, lam) >= 0.0


@pytest.mark.slow
class TestLargeSampleLaws:
    ALPHA = 1e-3
    N = 10 ** 6

    @pytest.mark.parametrize("model", [
        make_exponential_model(FeedbackFunction.power(1)),
        WaitingTimeModel.deterministic_uniform(0.5, 2.0),
        WaitingTimeModel.gamma(2.3, FeedbackFunction.constant(1.5)),
    ], ids=["exponential", "uniform", "gamma"])
    def test_kolmogorov_smirnov_against_registered_cdf(self, model):
        rng = np.random.default_rng(99)
        draws = model.sample_many(4, self.N, rng)
        result = stats.kstest(draws, lambda x: np.vectorize(model.cdf)(x, 4))
        assert result.pvalue > self.ALPHA

    def test_empirical_family_multinomial(self):
        values = (0.5, 1.0, 4.0)
        model = WaitingTimeModel.empirical(values)
        rng = np.random.default_rng(98)
        draws = model.sample_many(1, self.N, rng)
        observed = [int(np.sum(draws == v)) for v in values]
        result = stats.chisquare(observed)
        assert result.pvalue > self.ALPHA

    @pytest.mark.parametrize("model", [
        make_exponential_model(FeedbackFunction.power(1)),
        WaitingTimeModel.deterministic_uniform(0.5, 2.0),
        WaitingTimeModel.gamma(2.3, FeedbackFunction.constant(1.5)),
        WaitingTimeModel.empirical((0.5, 1.0, 4.0)),
    ], ids=["exponential", "uniform", "gamma", "empirical"])
    def test_symmetry_two_sample_ks(self, model):
        rng = np.random.default_rng(97)
        draws = symmetrized_sampler(model, 2).sample_many(self.N, rng)
        result = stats.ks_2samp(draws, -draws)
        assert result.pvalue > self.ALPHA

    @pytest.mark.parametrize("model", [
        make_exponential_model(FeedbackFunction.power(1)),
        WaitingTimeModel.deterministic_uniform(0.5, 2.0),
        WaitingTimeModel.gamma(2.3, FeedbackFunction.constant(1.5)),
        WaitingTimeModel.empirical((0.5, 1.0, 4.0)),
    ], ids=["exponential", "uniform", "gamma", "empirical"])
    def test_analytic_D_matches_monte_carlo(self, model):
        rng = np.random.default_rng(96)
        n = 10 ** 7
        draws = symmetrized_sampler(model, 3).sample_many(n, rng)
        for lam in (0.1, 1.0, 10.0):
            inside = np.abs(draws) <= lam
            terms = draws * draws * inside / lam ** 2 + (np.abs(draws) >= lam)
            estimate = float(terms.mean())
            se = float(terms.std(ddof=1)) / math.sqrt(n)
            assert abs(analytic_D(model, 3, lam) - estimate) < 3 * se + 1e-12
