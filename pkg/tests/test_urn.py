import math
from fractions import Fraction

import numpy as np
import pytest

from urnrace.errors import NumericRangeError
from urnrace.increments import FeedbackFunction
from urnrace.urn import (
    UrnState,
    UrnTrajectoryRecorder,
    coupling_equivalence_test,
    exact_sequence_distribution,
    run_urn,
    urn_step,
)


def test_state_validation():
    with pytest.raises(ValueError):
        UrnState((1,))
    with pytest.raises(ValueError):
        UrnState((1, 0))
    with pytest.raises(ValueError):
        UrnState((1, 1), step=-1)
    with pytest.raises(ValueError):
        UrnState((1,) * 65)


def test_single_step_increments_exactly_one_bin():
    rng = np.random.default_rng(0)
    state = UrnState((3, 1, 2))
    for _ in range(50):
        new = urn_step(state, FeedbackFunction.power(1), rng)
        deltas = [b - a for a, b in zip(state.counts, new.counts)]
        assert sorted(deltas) == [0, 0, 1]
        assert new.step == state.step + 1
        state = new


def test_zero_steps_returns_initial():
    state = UrnState((2, 5))
    assert run_urn(state, FeedbackFunction.constant(1.0), 0,
                   np.random.default_rng(0)) is state


def test_conservation():
    rng = np.random.default_rng(1)
    final = run_urn(UrnState((1, 1, 1)), FeedbackFunction.power(0.5), 1000, rng)
    assert sum(final.counts) == 3 + 1000
    assert final.step == 1000


def test_symmetric_frequencies():
    # equal counts under constant feedback: each bin wins half the time
    rng = np.random.default_rng(2)
    n = 10 ** 5
    wins = 0
    f = FeedbackFunction.constant(1.0)
    state = UrnState((1, 1))
    for _ in range(n):
        wins += urn_step(state, f, rng).counts[0] == 2
    assert abs(wins / n - 0.5) < 3 * math.sqrt(0.25 / n)


def test_linear_feedback_exact_probability():
    # counts (2,1) under f(m) = m+1 give weights (3,2): bin 0 wins w.p. 3/5
    rng = np.random.default_rng(3)
    n = 10 ** 5
    wins = 0
    f = FeedbackFunction.power(1)
    state = UrnState((2, 1))
    for _ in range(n):
        wins += urn_step(state, f, rng).counts[0] == 3
    p = 0.6
    assert abs(wins / n - p) < 3 * math.sqrt(p * (1 - p) / n)


def test_run_urn_equals_chained_steps_bit_for_bit():
    f = FeedbackFunction.power(0.4)
    state = UrnState((1, 2, 3))
    fast = run_urn(state, f, 2000, np.random.default_rng(7))
    slow = UrnState((1, 2, 3))
    rng = np.random.default_rng(7)
    for _ in range(2000):
        slow = urn_step(slow, f, rng)
    assert fast == slow


def test_observer_sees_every_step():
    steps = []
    run_urn(UrnState((1, 1)), FeedbackFunction.constant(1.0), 25,
            np.random.default_rng(4), observer=lambda s, c: steps.append((s, tuple(c))))
    assert [s for s, _ in steps] == list(range(1, 26))
    assert sum(steps[-1][1]) == 27


class TestOverflowHandling:
    def test_log_space_renormalization_matches_exact_ratio(self):
        # individual weights overflow float64, but the ratio-based selection
        # must still follow f(c0)/(f(c0)+f(c1)) computed exactly
        f = FeedbackFunction.power(40.0)
        counts = (10 ** 8, 2 * 10 ** 8)
        with pytest.raises(NumericRangeError):
            f(counts[0])
        exact = Fraction((counts[0] + 1) ** 40,
                         (counts[0] + 1) ** 40 + (counts[1] + 1) ** 40)
        n = 4000
        rng = np.random.default_rng(5)
        state = UrnState(counts)
        wins = sum(urn_step(state, f, rng).counts[0] == counts[0] + 1
                   for _ in range(n))
        # P(bin 0) ~ 9e-13: the renormalized sampler must essentially never pick it
        assert float(exact) < 1e-10
        assert wins == 0

    def test_scaling_invariance_of_probabilities(self):
        # renormalizing by the max leaves selection exactly invariant: compare
        # win frequencies under f and under the f/max weights on the same stream
        f = FeedbackFunction.power(40.0)
        state = UrnState((10 ** 8, 10 ** 8 + 10 ** 6))
        r1, r2 = np.random.default_rng(6), np.random.default_rng(6)
        picks_log = [urn_step(state, f, r1).counts for _ in range(200)]
        logs = [f.log_value(c) for c in state.counts]
        top = max(logs)
        ratio_f = FeedbackFunction.custom(
            lambda m, _l={c: math.exp(l - top) for c, l in zip(state.counts, logs)}: _l[m])
        picks_ratio = [urn_step(state, ratio_f, r2).counts for _ in range(200)]
        assert picks_log == picks_ratio

    def test_custom_feedback_overflow_raises_with_advice(self):
        f = FeedbackFunction.custom(lambda m: 10.0 ** 308)
        state = UrnState((1, 1, 1))
        with pytest.raises(NumericRangeError, match="rescale"):
            urn_step(state, f, np.random.default_rng(0))
        with pytest.raises(NumericRangeError, match="rescale"):
            run_urn(state, f, 5, np.random.default_rng(0))


class TestExactEnumeration:
    def test_hand_enumerated_linear_feedback(self):
        probs, arithmetic = exact_sequence_distribution(
            FeedbackFunction.power(1), (1, 1), 2)
        assert arithmetic == "rational"
        assert probs == [Fraction(3, 10), Fraction(1, 5),
                         Fraction(1, 5), Fraction(3, 10)]

    def test_single_draw_symmetric(self):
        probs, _ = exact_sequence_distribution(FeedbackFunction.constant(1), (1, 1), 1)
        assert probs == [Fraction(1, 2), Fraction(1, 2)]

    def test_probabilities_sum_to_one(self):
        probs, arithmetic = exact_sequence_distribution(
            FeedbackFunction.power(2), (2, 1, 1), 3)
        assert arithmetic == "rational"
        assert sum(probs) == 1

    def test_float_fallback_for_irrational_feedback(self):
        probs, arithmetic = exact_sequence_distribution(
            FeedbackFunction.power(0.5), (1, 1), 2)
        assert arithmetic == "float"
        assert sum(probs) == pytest.approx(1.0, abs=1e-12)

    def test_outcome_space_guard(self):
        with pytest.raises(ValueError):
            exact_sequence_distribution(FeedbackFunction.constant(1), (1, 1), 21)


class TestCouplingTest:
    def test_replicate_floor(self):
        with pytest.raises(ValueError):
            coupling_equivalence_test(FeedbackFunction.constant(1), (1, 1), 1,
                                      100, np.random.default_rng(0))

    def test_agreement_on_linear_feedback(self):
        rng = np.random.default_rng(1234)
        report = coupling_equivalence_test(FeedbackFunction.power(1), (1, 1), 2,
                                           10 ** 4, rng)
        assert report.arithmetic == "rational"
        assert report.degrees_of_freedom == 3
        assert sum(report.observed) == 10 ** 4
        assert report.p_value > 0.001

    def test_report_serializes(self):
        rng = np.random.default_rng(99)
        report = coupling_equivalence_test(FeedbackFunction.power(1), (1, 2), 1,
                                           10 ** 4, rng)
        payload = report.to_json()
        assert payload["probabilities"] == ["2/5", "3/5"]
        assert payload["k"] == 1


def test_trajectory_recorder_csv(tmp_path):
    state = UrnState((1, 1))
    recorder = UrnTrajectoryRecorder(state)
    run_urn(state, FeedbackFunction.constant(1.0), 10, np.random.default_rng(0),
            observer=recorder)
    path = tmp_path / "urn.csv"
    recorder.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "step,count0,count1"
    assert len(lines) == 12  # header + initial row + 10 steps
    assert lines[1] == "0,1,1"
