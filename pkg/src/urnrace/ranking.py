"""Weak-ordering statistics on integer value vectors and permutation coverage.

A permutation ``pi`` of ``0..A-1`` is *consistent* with a value vector when
``values[pi[0]] >= values[pi[1]] >= ... >= values[pi[A-1]]``.  The rank
weight :func:`xi` is the indicator of consistency divided by the number of
consistent permutations, so the weights of all ``A!`` permutations sum to 1
exactly; ties split the unit mass evenly over every ordering they allow.
All of this runs in exact rational arithmetic, never floats.

:class:`PermutationCoverage` tracks which permutations have appeared as a
process evolves, with the step or time of each first appearance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from itertools import permutations

import numpy as np

from . import montecarlo
from .race import RaceConfig, TimeHorizon, simulate_race, value_at

MAX_TRACKED_AGENTS = 8  # 8! coverage bits; beyond that full coverage is unobservable anyway

_ENUMERATION_LIMIT = 8
_mask_cache = {}
_count_cache = {}


def perm_rank(perm):
    """Lexicographic rank of a permutation of ``0..n-1`` (Lehmer code)."""
    perm = tuple(perm)
    n = len(perm)
    rank = 0
    for i in range(n):
        smaller = sum(1 for j in range(i + 1, n) if perm[j] < perm[i])
        rank += smaller * math.factorial(n - 1 - i)
    return rank


def perm_unrank(rank, n):
    """Inverse of :func:`perm_rank`."""
    rank = int(rank)
    if not 0 <= rank < math.factorial(n):
        raise ValueError(f"rank {rank} out of range for n={n}")
    items = list(range(n))
    out = []
    for i in range(n, 0, -1):
        f = math.factorial(i - 1)
        idx, rank = divmod(rank, f)
        out.append(items.pop(idx))
    return tuple(out)


def _check_permutation(pi, n):
    pi = tuple(int(p) for p in pi)
    if sorted(pi) != list(range(n)):
        raise ValueError(f"{pi!r} is not a permutation of 0..{n - 1}")
    return pi


def _tie_groups(values):
    """Agent indices grouped by value, groups in descending value order."""
    order = sorted(range(len(values)), key=lambda a: (-values[a], a))
    groups = []
    for a in order:
        if groups and values[groups[-1][-1]] == values[a]:
            groups[-1].append(a)
        else:
            groups.append([a])
    return groups


def consistent_orderings(values):
    """All permutations whose descending chain the value vector satisfies.

    Built from the tie groups directly, so the output size equals the product
    of factorials of the tie multiplicities rather than ``A!``.
    """
    groups = _tie_groups(values)
    result = {()}
    for group in groups:
        result = {prefix + tail for prefix in result for tail in permutations(group)}
    return result


def count_consistent(values):
    """Number of consistent permutations, by the tie-group factorial product."""
    key = tuple(sorted(values))
    cached = _count_cache.get(key)
    if cached is None:
        cached = 1
        run = 1
        for i in range(1, len(key)):
            run = run + 1 if key[i] == key[i - 1] else 1
            cached *= run
        _count_cache[key] = cached
    return cached


def count_consistent_by_enumeration(values):
    """Consistency count by explicit enumeration over all A! permutations.

    Independent of :func:`count_consistent`; usable for ``A <= 8``.
    """
    values = tuple(values)
    if len(values) > _ENUMERATION_LIMIT:
        raise ValueError(f"enumeration supports at most {_ENUMERATION_LIMIT} agents")
    total = 0
    for perm in permutations(range(len(values))):
        ok = True
        prev = values[perm[0]]
        for a in perm[1:]:
            cur = values[a]
            if prev < cur:
                ok = False
                break
            prev = cur
        total += ok
    return total


def xi(pi, values):
    """Rank weight of permutation ``pi`` on ``values``: exact :class:`Fraction`.

    ``1 / (number of consistent permutations)`` when ``pi`` is consistent,
    else 0.  For up to 8 agents the denominator is counted by enumeration;
    beyond that by the tie-group factorial product (the two agree).
    """
    values = tuple(values)
    n = len(values)
    pi = _check_permutation(pi, n)
    prev = values[pi[0]]
    for a in pi[1:]:
        cur = values[a]
        if prev < cur:
            return Fraction(0)
        prev = cur
    if n <= _ENUMERATION_LIMIT:
        return Fraction(1, count_consistent_by_enumeration(values))
    return Fraction(1, count_consistent(values))


# ---------------------------------------------------------------------------
# Coverage tracking

def _dense_pattern(values):
    """Tie pattern of a vector: per-agent rank among distinct values, descending."""
    distinct = sorted(set(values), reverse=True)
    lookup = {v: r for r, v in enumerate(distinct)}
    return tuple(lookup[v] for v in values)


def _consistent_mask(num_agents, pattern):
    """Bitmask over permutation ranks consistent with a tie pattern."""
    key = (num_agents, pattern)
    mask = _mask_cache.get(key)
    if mask is None:
        # pattern ranks ascend where values descend, so negate before reuse
        mask = 0
        for perm in consistent_orderings(tuple(-r for r in pattern)):
            mask |= 1 << perm_rank(perm)
        _mask_cache[key] = mask
    return mask


class PermutationCoverage:
    """Monotone record of which orderings a value process has realized.

    Under the ``weak`` policy a snapshot with ties marks every permutation it
    is consistent with at once; under ``strict`` only all-distinct snapshots
    mark their unique descending permutation and tied snapshots are skipped.
    Bits never clear, and replaying a snapshot is idempotent.  Single-writer;
    merge parallel trackers with :meth:`merge`.
    """

    __slots__ = ("num_agents", "policy", "num_perms", "seen", "first_hit")

    def __init__(self, num_agents, policy="weak"):
        num_agents = int(num_agents)
        if not 2 <= num_agents <= MAX_TRACKED_AGENTS:
            raise ValueError(f"coverage tracking supports 2..{MAX_TRACKED_AGENTS} agents")
        if policy not in ("weak", "strict"):
            raise ValueError("policy must be 'weak' or 'strict'")
        self.num_agents = num_agents
        self.policy = policy
        self.num_perms = math.factorial(num_agents)
        self.seen = 0
        self.first_hit = {}

    def update(self, values, stamp):
        """Mark the orderings realized by one snapshot, stamped with its step or time."""
        values = tuple(values)
        if len(values) != self.num_agents:
            raise ValueError(f"expected {self.num_agents} values, got {len(values)}")
        pattern = _dense_pattern(values)
        if self.policy == "strict":
            if len(set(pattern)) != self.num_agents:
                return self
            order = tuple(sorted(range(self.num_agents), key=lambda a: pattern[a]))
            mask = 1 << perm_rank(order)
        else:
            mask = _consistent_mask(self.num_agents, pattern)
        new = mask & ~self.seen
        if new:
            self.seen |= mask
            while new:
                low = new & (-new)
                self.first_hit[low.bit_length() - 1] = stamp
                new ^= low
        return self

    @property
    def seen_count(self):
        return bin(self.seen).count("1")

    def is_full(self):
        return self.seen_count == self.num_perms

    def seen_permutations(self):
        return [perm_unrank(r, self.num_agents) for r in sorted(self.first_hit)]

    def merge(self, other):
        """Combine with another tracker: union of bits, earliest first hits.

        Associative and commutative, so parallel reductions may merge in any
        order.
        """
        if (other.num_agents, other.policy) != (self.num_agents, self.policy):
            raise ValueError("can only merge trackers with equal agents and policy")
        merged = PermutationCoverage(self.num_agents, self.policy)
        merged.seen = self.seen | other.seen
        merged.first_hit = dict(self.first_hit)
        for rank, stamp in other.first_hit.items():
            if rank not in merged.first_hit or stamp < merged.first_hit[rank]:
                merged.first_hit[rank] = stamp
        return merged

    @staticmethod
    def merge_all(trackers):
        trackers = list(trackers)
        if not trackers:
            raise ValueError("nothing to merge")
        merged = trackers[0]
        for tracker in trackers[1:]:
            merged = merged.merge(tracker)
        return merged

    def to_json(self):
        """Policy, bit count, and per-permutation first hits in lexicographic rank order."""
        hits = [self.first_hit.get(r) for r in range(self.num_perms)]
        return {"num_agents": self.num_agents, "policy": self.policy,
                "seen_count": self.seen_count, "first_hit": hits}

    @classmethod
    def from_json(cls, payload):
        tracker = cls(payload["num_agents"], payload["policy"])
        for rank, stamp in enumerate(payload["first_hit"]):
            if stamp is not None:
                tracker.seen |= 1 << rank
                tracker.first_hit[rank] = stamp
        return tracker

    def __repr__(self):
        return (f"PermutationCoverage(agents={self.num_agents}, policy={self.policy!r}, "
                f"seen={self.seen_count}/{self.num_perms})")


def update_coverage(tracker, values, stamp):
    """Record one snapshot in ``tracker`` (mutates it) and return it."""
    return tracker.update(values, stamp)


# ---------------------------------------------------------------------------
# Monte Carlo estimate of the rank-weight mean over race snapshots

@dataclass(frozen=True)
class _XiReplicateTask:
    model: object
    num_agents: int
    times: tuple
    shift_mode: str      # "none" | "fixed" | "uniform"
    shifts: tuple        # per-agent shifts for "fixed"
    shift_max: float     # upper bound for "uniform"
    event_cap: int
    int_weight: int      # A!

    def __call__(self, index, rng):
        if self.shift_mode == "uniform":
            shifts = rng.random(self.num_agents) * self.shift_max
        elif self.shift_mode == "fixed":
            shifts = np.asarray(self.shifts)
        else:
            shifts = np.zeros(self.num_agents)
        horizon = max(self.times) + float(shifts.max())
        config = RaceConfig(self.num_agents, (0,) * self.num_agents, self.model,
                            TimeHorizon(horizon), event_cap=self.event_cap)
        traj = simulate_race(config, rng=rng)
        if traj.exploded:
            return None
        n_perms = math.factorial(self.num_agents)
        sums = np.zeros((len(self.times), n_perms), dtype=np.int64)
        for ti, t in enumerate(self.times):
            values = tuple(value_at(traj, a, t + float(shifts[a]))
                           for a in range(self.num_agents))
            weight = self.int_weight // count_consistent(values)
            for perm in consistent_orderings(values):
                sums[ti, perm_rank(perm)] = weight
        return sums


@dataclass
class XiConvergenceReport:
    """Per-permutation, per-time mean rank weights with confidence intervals.

    ``int_sums[t_index, perm_rank]`` accumulates the weights as exact integer
    multiples of ``1 / A!``, so the per-snapshot normalization survives
    aggregation: summing over permutations always gives ``A! * count``.
    """

    num_agents: int
    times: tuple
    replicates: int
    excluded: int
    shift_mode: str
    int_sums: np.ndarray      # (times, A!) integer totals in units of 1/A!
    int_sumsq: np.ndarray
    summaries: dict           # (perm tuple, time) -> SummaryStats

    def mean(self, pi, t):
        return self.summaries[(tuple(pi), t)].mean

    def to_json(self):
        return {
            "num_agents": self.num_agents,
            "times": list(self.times),
            "replicates": self.replicates,
            "excluded": self.excluded,
            "shift_mode": self.shift_mode,
            "estimates": [
                {"permutation": list(pi), "time": t, **stats.to_json()}
                for (pi, t), stats in sorted(self.summaries.items())
            ],
        }


def xi_convergence_estimate(model, num_agents, times, replicates, master_seed,
                            shifts=None, workers=1, event_cap=1 << 32,
                            max_exclusion=0.01):
    """Monte Carlo means of the rank weight at each observation time.

    All agents start from value 0.  ``shifts`` selects the per-agent
    observation shift: ``None`` observes every agent at ``t``; a sequence of
    ``A`` nonnegative floats observes agent ``a`` at ``t + s_a``; the pair
    ``("uniform", M)`` draws fresh i.i.d. shifts in ``[0, M]`` per replicate.
    Exploded replicates are excluded and counted; more than
    ``max_exclusion`` of them is an error rather than a biased estimate.
    """
    num_agents = int(num_agents)
    if num_agents < 2:
        raise ValueError("need at least 2 agents")
    replicates = int(replicates)
    if replicates < 100:
        raise ValueError("need at least 100 replicates")
    times = tuple(float(t) for t in times)
    if not times or any(t < 0 for t in times):
        raise ValueError("observation times must be nonnegative and nonempty")

    if shifts is None:
        mode, fixed, smax = "none", (), 0.0
    elif isinstance(shifts, tuple) and len(shifts) == 2 and shifts[0] == "uniform":
        mode, fixed, smax = "uniform", (), float(shifts[1])
        if smax < 0:
            raise ValueError("shift bound must be >= 0")
    else:
        fixed = tuple(float(s) for s in shifts)
        if len(fixed) != num_agents or any(s < 0 for s in fixed):
            raise ValueError(f"need {num_agents} nonnegative shifts")
        mode, smax = "fixed", max(fixed)

    n_perms = math.factorial(num_agents)
    task = _XiReplicateTask(model, num_agents, times, mode, fixed, smax,
                            int(event_cap), n_perms)
    outputs = montecarlo.map_replicates(task, replicates, master_seed, workers=workers)

    int_sums = np.zeros((len(times), n_perms), dtype=np.int64)
    int_sumsq = np.zeros((len(times), n_perms), dtype=np.int64)
    excluded = 0
    kept = 0
    for out in outputs:
        if out is None:
            excluded += 1
            continue
        kept += 1
        int_sums += out
        int_sumsq += out * out
    if excluded / replicates > max_exclusion:
        raise RuntimeError(f"{excluded}/{replicates} replicates exploded and were "
                           f"excluded (limit {max_exclusion:.0%}); raise the horizon "
                           "or the event cap")

    z = 1.959963984540054  # 95% normal quantile
    summaries = {}
    for ti, t in enumerate(times):
        for rank in range(n_perms):
            mean = int_sums[ti, rank] / (n_perms * kept)
            ex2 = int_sumsq[ti, rank] / (n_perms * n_perms * kept)
            var = max(0.0, ex2 - mean * mean)
            stderr = math.sqrt(var / kept)
            summaries[(perm_unrank(rank, num_agents), t)] = montecarlo.SummaryStats(
                mean=mean, stderr=stderr,
                ci_low=mean - z * stderr, ci_high=mean + z * stderr,
                count=kept, excluded=excluded,
                valid=(excluded / replicates) <= max_exclusion)
    return XiConvergenceReport(num_agents, times, replicates, excluded, mode,
                               int_sums, int_sumsq, summaries)
