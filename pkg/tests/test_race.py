import json
import math

import numpy as np
import pytest
from scipy import stats

from urnrace.errors import NotYetReachedError
from urnrace.increments import FeedbackFunction, WaitingTimeModel, make_exponential_model
from urnrace.race import (
    EventHorizon,
    RaceConfig,
    TimeHorizon,
    dump_events_csv,
    dump_events_jsonl,
    hitting_time,
    jump_chain,
    simulate_race,
    value_at,
)

UNIT_WAITS = WaitingTimeModel.deterministic_uniform(1.0, 0.0)
EXP_UNIT = make_exponential_model(FeedbackFunction.constant(1.0))


def test_config_validation():
    with pytest.raises(ValueError):
        RaceConfig(1, (0,), UNIT_WAITS, TimeHorizon(1.0))
    with pytest.raises(ValueError):
        RaceConfig(2, (0,), UNIT_WAITS, TimeHorizon(1.0))
    with pytest.raises(ValueError):
        RaceConfig(2, (0, -1), UNIT_WAITS, TimeHorizon(1.0))
    with pytest.raises(ValueError):
        RaceConfig(2, (0, 0), UNIT_WAITS, TimeHorizon(-1.0))
    with pytest.raises(ValueError):
        RaceConfig(2, (0, 0), UNIT_WAITS, EventHorizon(-1))
    with pytest.raises(ValueError):
        RaceConfig(2, (0, 0), UNIT_WAITS, (3.5,))


class TestDeterministicRace:
    def test_unit_waits_time_horizon(self):
        config = RaceConfig(2, (0, 0), UNIT_WAITS, TimeHorizon(3.5))
        traj = simulate_race(config)
        assert traj.final_values == (3, 3)
        assert not traj.exploded
        # ties at integer times break by agent index
        assert traj.event_agents.tolist() == [0, 1, 0, 1, 0, 1]
        assert traj.event_times.tolist() == [1.0, 1.0, 2.0, 2.0, 3.0, 3.0]

    def test_value_at_right_continuity(self):
        config = RaceConfig(2, (0, 0), UNIT_WAITS, TimeHorizon(3.5))
        traj = simulate_race(config)
        assert value_at(traj, 0, 0.0) == 0
        assert value_at(traj, 0, 2.999) == 2
        assert value_at(traj, 0, 3.0) == 3

    def test_value_at_initial_value_with_positive_first_wait(self):
        config = RaceConfig(2, (4, 7), UNIT_WAITS, TimeHorizon(0.5))
        traj = simulate_race(config)
        assert value_at(traj, 0, 0.0) == 4
        assert value_at(traj, 1, 0.0) == 7

    def test_value_at_range_checks(self):
        traj = simulate_race(RaceConfig(2, (0, 0), UNIT_WAITS, TimeHorizon(3.5)))
        with pytest.raises(ValueError):
            value_at(traj, 0, 3.6)
        with pytest.raises(ValueError):
            value_at(traj, 0, -0.1)

    def test_hitting_times(self):
        config = RaceConfig(2, (0, 0), UNIT_WAITS, TimeHorizon(7.5))
        traj = simulate_race(config)
        assert hitting_time(traj, 0, 0) == 0.0
        assert hitting_time(traj, 0, 7) == 7.0
        with pytest.raises(NotYetReachedError) as err:
            hitting_time(traj, 0, 8)
        assert err.value.highest_reached == 7

    def test_hitting_time_below_initial_is_zero(self):
        config = RaceConfig(2, (5, 5), UNIT_WAITS, TimeHorizon(2.5))
        traj = simulate_race(config)
        assert hitting_time(traj, 0, 3) == 0.0
        assert hitting_time(traj, 0, 5) == 0.0
        assert hitting_time(traj, 0, 6) == 1.0


class TestEventHorizon:
    def test_exact_event_count_and_conservation(self):
        config = RaceConfig(3, (1, 0, 2), EXP_UNIT, EventHorizon(100), seed=5)
        traj = simulate_race(config)
        assert traj.event_count == 100
        assert len(traj.event_times) == 100
        assert sum(traj.final_values) - sum(config.initial_values) == 100

    def test_zero_events(self):
        config = RaceConfig(2, (0, 0), EXP_UNIT, EventHorizon(0), seed=5)
        traj = simulate_race(config)
        assert traj.event_count == 0
        assert traj.final_values == (0, 0)


class TestJumpChain:
    def test_first_entry_single_increment(self):
        config = RaceConfig(2, (0, 0), EXP_UNIT, EventHorizon(10), seed=3)
        chain = jump_chain(simulate_race(config))
        agent, values = chain[0]
        assert sorted(values) == [0, 1]
        assert values[agent] == 1

    def test_counting_identity(self):
        config = RaceConfig(3, (2, 0, 1), EXP_UNIT, EventHorizon(50), seed=9)
        chain = jump_chain(simulate_race(config))
        for n, (_, values) in enumerate(chain, start=1):
            assert sum(values) == n + 3

    def test_truncation_is_explicit(self):
        config = RaceConfig(2, (0, 0), EXP_UNIT, EventHorizon(5), seed=1)
        chain = jump_chain(simulate_race(config), steps=50)
        assert len(chain) == 5

    def test_first_jumper_symmetric(self):
        config = RaceConfig(2, (0, 0), EXP_UNIT, EventHorizon(1))
        rng = np.random.default_rng(314)
        n = 10 ** 5
        firsts = 0
        for _ in range(n):
            traj = simulate_race(config, rng=rng)
            firsts += int(traj.event_agents[0]) == 0
        assert abs(firsts / n - 0.5) < 3 * math.sqrt(0.25 / n)


def test_determinism_same_config_same_seed():
    config = RaceConfig(3, (0, 1, 0), EXP_UNIT, TimeHorizon(20.0), seed=123)
    a = simulate_race(config)
    b = simulate_race(config)
    assert a.final_values == b.final_values
    assert np.array_equal(a.event_times, b.event_times)
    assert np.array_equal(a.event_agents, b.event_agents)
    for ja, jb in zip(a.jump_times, b.jump_times):
        assert np.array_equal(ja, jb)


def test_observer_stream_matches_record():
    config = RaceConfig(2, (0, 0), EXP_UNIT, EventHorizon(40), seed=8)
    seen = []
    traj = simulate_race(config, observer=lambda t, a, v: seen.append((t, a, tuple(v))),
                         record=False)
    assert not traj.recorded
    with pytest.raises(RuntimeError):
        value_at(traj, 0, 1.0)
    recorded = simulate_race(config)
    assert [s[0] for s in seen] == recorded.event_times.tolist()
    assert [s[1] for s in seen] == recorded.event_agents.tolist()
    assert seen[-1][2] == recorded.final_values


def test_exchangeability_of_agent_labels():
    # agents share one law, so P(v0 > v1) and P(v1 > v0) must balance
    config = RaceConfig(2, (0, 0), EXP_UNIT, TimeHorizon(10.0))
    rng = np.random.default_rng(2718)
    n = 10 ** 5
    diff = 0
    for _ in range(n):
        traj = simulate_race(config, rng=rng, record=False)
        v0, v1 = traj.final_values
        diff += (v0 > v1) - (v1 > v0)
    assert abs(diff / n) < 3 * math.sqrt(1.0 / n)


@pytest.mark.slow
def test_exchangeability_distributional():
    # per-agent final values over many replicates are equal in law
    config = RaceConfig(2, (0, 0), EXP_UNIT, TimeHorizon(20.0))
    rng = np.random.default_rng(13)
    finals = np.array([simulate_race(config, rng=rng, record=False).final_values
                       for _ in range(10 ** 4)])
    result = stats.ks_2samp(finals[:, 0], finals[:, 1])
    assert result.pvalue > 1e-3


class TestExplosionGuard:
    def test_explosive_race_flags_and_returns(self):
        # inverse-square-summable rates explode in finite time; the cap stops the run
        model = make_exponential_model(FeedbackFunction.power(2))
        config = RaceConfig(2, (0, 0), model, TimeHorizon(100.0), seed=4,
                            event_cap=3000)
        traj = simulate_race(config)
        assert traj.exploded
        assert traj.event_count == 3000
        assert traj.horizon_time == traj.event_times[-1]
        assert value_at(traj, 0, traj.horizon_time) == traj.final_values[0]

    def test_nonexplosive_run_unflagged(self):
        config = RaceConfig(2, (0, 0), EXP_UNIT, TimeHorizon(5.0), seed=4)
        assert not simulate_race(config).exploded


class TestDumps:
    def test_jsonl_round_trip(self, tmp_path):
        config = RaceConfig(2, (1, 0), EXP_UNIT, EventHorizon(7), seed=2)
        traj = simulate_race(config)
        path = tmp_path / "events.jsonl"
        dump_events_jsonl(traj, path)
        records = [json.loads(line) for line in path.read_text().splitlines()]
        assert len(records) == 7
        assert records[0]["time"] == traj.event_times[0]
        assert [r["agent"] for r in records] == traj.event_agents.tolist()
        assert records[-1]["values"] == list(traj.final_values)

    def test_csv_layout(self, tmp_path):
        config = RaceConfig(3, (0, 0, 0), EXP_UNIT, EventHorizon(4), seed=2)
        traj = simulate_race(config)
        path = tmp_path / "events.csv"
        dump_events_csv(traj, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "time,agent,v0,v1,v2"
        assert len(lines) == 5
        last = lines[-1].split(",")
        assert tuple(int(v) for v in last[2:]) == traj.final_values
