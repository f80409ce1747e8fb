"""Event-driven simulation of competing integer-valued growth processes.

``A >= 2`` agents each carry a nonnegative integer value.  Agent ``a`` moves
from value ``j - 1`` to ``j`` after an independent wait drawn from the shared
:class:`~urnrace.increments.WaitingTimeModel` at level ``j``; waits are
i.i.d. across agents at each fixed level.  The engine schedules next-jump
times on a binary min-heap keyed ``(time, agent)``, so zero-probability ties
resolve deterministically by agent index.  Per-agent jump times are
accumulated with compensated (Kahan) summation: long races would otherwise
drift enough to corrupt hitting-time queries.
"""

from __future__ import annotations

import csv
import heapq
import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import NotYetReachedError
from .increments import WaitingTimeModel

DEFAULT_EVENT_CAP = 1 << 32


@dataclass(frozen=True)
class TimeHorizon:
    """Run until the next event would land after ``t_max``."""

    t_max: float

    def __post_init__(self):
        if not (self.t_max >= 0.0 and math.isfinite(self.t_max)):
            raise ValueError("t_max must be finite and >= 0")


@dataclass(frozen=True)
class EventHorizon:
    """Run for exactly ``n_max`` global events (fewer if the cap trips)."""

    n_max: int

    def __post_init__(self):
        if self.n_max < 0:
            raise ValueError("n_max must be >= 0")


@dataclass(frozen=True)
class RaceConfig:
    num_agents: int
    initial_values: tuple
    model: WaitingTimeModel
    horizon: TimeHorizon | EventHorizon
    seed: int = 0
    event_cap: int = DEFAULT_EVENT_CAP

    def __post_init__(self):
        if self.num_agents < 2:
            raise ValueError("need at least 2 agents")
        object.__setattr__(self, "initial_values", tuple(int(v) for v in self.initial_values))
        if len(self.initial_values) != self.num_agents:
            raise ValueError("initial_values length must equal num_agents")
        if any(v < 0 for v in self.initial_values):
            raise ValueError("initial values must be >= 0")
        if not isinstance(self.horizon, (TimeHorizon, EventHorizon)):
            raise ValueError("horizon must be a TimeHorizon or an EventHorizon")
        if self.event_cap < 1:
            raise ValueError("event_cap must be >= 1")


class Trajectory:
    """Result of one race: per-agent jump times plus the merged event log.

    ``jump_times[a]`` holds the times agent ``a`` reached ``v_in + 1,
    v_in + 2, ...``; the event log pairs ``event_times`` with
    ``event_agents``.  Both exist only when the race was recorded.
    Immutable after construction and safe to move between threads.
    """

    __slots__ = ("num_agents", "initial_values", "final_values", "horizon_time",
                 "event_count", "exploded", "recorded", "jump_times",
                 "event_times", "event_agents")

    def __init__(self, num_agents, initial_values, final_values, horizon_time,
                 event_count, exploded, jump_times=None, event_times=None,
                 event_agents=None):
        self.num_agents = num_agents
        self.initial_values = tuple(initial_values)
        self.final_values = tuple(final_values)
        self.horizon_time = horizon_time
        self.event_count = event_count
        self.exploded = exploded
        self.recorded = jump_times is not None
        self.jump_times = jump_times
        self.event_times = event_times
        self.event_agents = event_agents

    def __repr__(self):
        flag = ", exploded" if self.exploded else ""
        return (f"Trajectory(agents={self.num_agents}, events={self.event_count}, "
                f"horizon_time={self.horizon_time:g}{flag})")


def simulate_race(config, rng=None, observer=None, record=True):
    """Run one race to its horizon and return the :class:`Trajectory`.

    ``rng`` defaults to ``numpy.random.default_rng(config.seed)``; a fixed
    (config, seed) pair reproduces the trajectory bit for bit.  ``observer``,
    if given, is called as ``observer(time, agent, values)`` after every jump,
    with ``values`` a read-only view of the live value list.  With
    ``record=False`` no jump logs are kept, which keeps huge runs cheap;
    ``value_at`` and friends then refuse to answer.

    If ``config.event_cap`` events accumulate before the horizon is reached,
    the trajectory is returned with its ``exploded`` flag set instead of
    looping forever; convergent-wait regimes do explode in finite time.
    """
    if rng is None:
        rng = np.random.default_rng(config.seed)
    model = config.model
    A = config.num_agents
    values = list(config.initial_values)

    if isinstance(config.horizon, TimeHorizon):
        t_max = config.horizon.t_max
        n_max = None
    else:
        t_max = None
        n_max = config.horizon.n_max
    cap = config.event_cap

    sums = [0.0] * A
    comps = [0.0] * A
    heap = []
    exp_fast = model.family == "exponential"
    if exp_fast:
        feedback = model.feedback
        rates = feedback.values_upto(max(values) + 2)
        buf = rng.random(256)
        buf_n = len(buf)
        buf_i = 0

    def draw(level):
        nonlocal buf, buf_i, buf_n, rates
        if exp_fast:
            if level > len(rates):
                if 2 * level <= feedback.memo_cap:
                    rates = feedback.values_upto(2 * level)
                else:
                    return model.sample(level, rng)
            if buf_i == buf_n:
                buf = rng.random(4096)
                buf_n = 4096
                buf_i = 0
            u = buf[buf_i]
            buf_i += 1
            while u == 0.0:
                if buf_i == buf_n:
                    buf = rng.random(4096)
                    buf_n = 4096
                    buf_i = 0
                u = buf[buf_i]
                buf_i += 1
            return -math.log(u) / rates[level - 1]
        return model.sample(level, rng)

    for a in range(A):
        w = draw(values[a] + 1)
        y = w - comps[a]
        s = sums[a] + y
        comps[a] = (s - sums[a]) - y
        sums[a] = s
        heapq.heappush(heap, (s, a))

    if record:
        agent_jumps = [[] for _ in range(A)]
        ev_times = []
        ev_agents = []
    count = 0
    exploded = False
    last_time = 0.0

    while True:
        if n_max is not None and count >= n_max:
            break
        if count >= cap:
            exploded = True
            break
        t, a = heapq.heappop(heap)
        if t_max is not None and t > t_max:
            break
        values[a] += 1
        count += 1
        last_time = t
        if record:
            agent_jumps[a].append(t)
            ev_times.append(t)
            ev_agents.append(a)
        if observer is not None:
            observer(t, a, values)
        w = draw(values[a] + 1)
        y = w - comps[a]
        s = sums[a] + y
        comps[a] = (s - sums[a]) - y
        sums[a] = s
        heapq.heappush(heap, (s, a))

    if t_max is not None and not exploded:
        horizon_time = t_max
    else:
        horizon_time = last_time

    if record:
        return Trajectory(
            A, config.initial_values, values, horizon_time, count, exploded,
            jump_times=[np.asarray(j, dtype=np.float64) for j in agent_jumps],
            event_times=np.asarray(ev_times, dtype=np.float64),
            event_agents=np.asarray(ev_agents, dtype=np.int32),
        )
    return Trajectory(A, config.initial_values, values, horizon_time, count, exploded)


def _require_recorded(traj):
    if not traj.recorded:
        raise RuntimeError("trajectory was simulated with record=False; "
                           "re-run with record=True to query it")


def value_at(traj, agent, t):
    """Value of ``agent`` at time ``t``: the initial value plus jumps at or before ``t``.

    Right-continuous; a query exactly at a jump time includes that jump.
    ``t`` must lie within the simulated horizon (the trajectory is not
    extendable).
    """
    _require_recorded(traj)
    if not 0.0 <= t <= traj.horizon_time:
        raise ValueError(f"t={t} outside the simulated horizon [0, {traj.horizon_time}]")
    k = int(np.searchsorted(traj.jump_times[agent], t, side="right"))
    return traj.initial_values[agent] + k


def hitting_time(traj, agent, n):
    """Time for ``agent`` to reach value ``n``; 0 for any ``n`` at or below its start."""
    _require_recorded(traj)
    n = int(n)
    if n < 0:
        raise ValueError("n must be >= 0")
    v_in = traj.initial_values[agent]
    if n <= v_in:
        return 0.0
    k = n - v_in
    jumps = traj.jump_times[agent]
    if k > len(jumps):
        raise NotYetReachedError(agent, n, v_in + len(jumps))
    return float(jumps[k - 1])


def jump_chain(traj, steps=None):
    """The discrete chain at the global jump epochs.

    Entry ``n`` (0-indexed) is ``(agent, values)`` with ``values`` the full
    value vector right after the ``n+1``-th global event.  Requesting more
    steps than were simulated returns the available prefix; its length makes
    the truncation explicit.  Simultaneous jumps (probability zero under
    continuous laws) appear serialized by agent index.
    """
    _require_recorded(traj)
    total = traj.event_count if steps is None else min(int(steps), traj.event_count)
    values = list(traj.initial_values)
    chain = []
    agents = traj.event_agents
    for n in range(total):
        a = int(agents[n])
        values[a] += 1
        chain.append((a, tuple(values)))
    return chain


def iter_events(traj):
    """Yield ``(time, agent, values)`` per global event, values as a tuple."""
    _require_recorded(traj)
    values = list(traj.initial_values)
    for t, a in zip(traj.event_times, traj.event_agents):
        a = int(a)
        values[a] += 1
        yield float(t), a, tuple(values)


def dump_events_jsonl(traj, path):
    """One JSON object per global event: ``{"time": t, "agent": a, "values": [...]}``."""
    with open(path, "w", newline="\n") as fh:
        for t, a, values in iter_events(traj):
            fh.write(json.dumps({"time": t, "agent": a, "values": list(values)}))
            fh.write("\n")


def dump_events_csv(traj, path):
    """CSV event log with header ``time,agent,v0,...,v{A-1}``."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time", "agent"] + [f"v{i}" for i in range(traj.num_agents)])
        for t, a, values in iter_events(traj):
            writer.writerow([repr(t), a] + list(values))
