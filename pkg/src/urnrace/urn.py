"""Discrete balls-in-bins process with feedback.

At each step a bin holding ``m`` balls is selected with probability
proportional to ``f(m)`` and receives one ball.  Bin selection scans
cumulative weights left to right (A stays small, and the weights change every
step, so an alias table would buy nothing).  When the weight sum overflows
float64 the scan switches to max-renormalized weights computed in log space;
scaling the weight vector leaves the selection probabilities invariant.

:func:`coupling_equivalence_test` checks this discrete recursion against the
jump chain of the continuous exponential race started from the same counts:
the two are equal in distribution, and the test quantifies the agreement with
an exact enumeration plus a chi-square statistic.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from fractions import Fraction
from itertools import product

import numpy as np
from scipy.stats import chi2 as chi2_dist

from .errors import NumericRangeError
from .increments import make_exponential_model
from .race import EventHorizon, RaceConfig, simulate_race

MAX_LINEAR_SCAN_BINS = 64
_ENUM_BITS = 20  # outcome spaces for exact enumeration stay under 2**20


@dataclass(frozen=True)
class UrnState:
    counts: tuple
    step: int = 0

    def __post_init__(self):
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))
        if len(self.counts) < 2:
            raise ValueError("need at least 2 bins")
        if len(self.counts) > MAX_LINEAR_SCAN_BINS:
            raise ValueError(f"at most {MAX_LINEAR_SCAN_BINS} bins are supported")
        if any(c < 1 for c in self.counts):
            raise ValueError("initial counts must all be >= 1")
        if self.step < 0:
            raise ValueError("step must be >= 0")

    @property
    def total(self):
        return sum(self.counts)


def _select_bin(weights, u):
    """First index whose cumulative weight strictly exceeds ``u``.

    ``u`` is pre-scaled to ``[0, total)``.  Left-to-right accumulation here is
    the reference arithmetic; the vectorized experiment runners reproduce it
    with ``cumsum`` so both paths pick identical bins for identical draws.
    """
    acc = 0.0
    last = len(weights) - 1
    for idx, w in enumerate(weights):
        acc += w
        if u < acc:
            return idx
    return last


def urn_step(state, feedback, rng):
    """Advance the urn by one reinforcement step."""
    try:
        weights = [feedback(c) for c in state.counts]
        total = 0.0
        for w in weights:
            total += w
    except NumericRangeError:
        total = math.inf
    if math.isinf(total):
        weights, total = _overflow_weights(state.counts, feedback)
    u = rng.random() * total
    chosen = _select_bin(weights, u)
    counts = list(state.counts)
    counts[chosen] += 1
    return UrnState(tuple(counts), state.step + 1)


def run_urn(initial, feedback, steps, rng, observer=None):
    """Apply ``steps`` reinforcement steps and return the final state.

    ``observer``, if given, is called as ``observer(step, counts)`` after each
    step with the 1-based step index and a read-only view of the live counts;
    this is where ranking trackers attach.  Draws one uniform per step in step
    order, so the result is bit-identical to ``steps`` chained
    :func:`urn_step` calls on the same generator.
    """
    steps = int(steps)
    if steps < 0:
        raise ValueError("steps must be >= 0")
    counts = list(initial.counts)
    if steps == 0:
        return initial
    A = len(counts)
    last = A - 1
    max_count = max(counts) + steps
    table = None
    if max_count < feedback.memo_cap:
        # raw table: inf entries are tolerated here and trigger the
        # log-space fallback at the step that actually reaches them
        raw = feedback._compute_range(0, max_count + 1)
        if (~(raw > 0.0)).any() or np.isnan(raw).any():
            bad = int(np.flatnonzero(~(raw > 0.0) | np.isnan(raw))[0])
            raise ValueError(f"feedback weight at count {bad} is {raw[bad]}; "
                             "weights must be positive")
        table = raw.tolist()
    buf = rng.random(min(steps, 8192))
    buf_n = len(buf)
    buf_i = 0
    for step in range(1, steps + 1):
        if buf_i == buf_n:
            buf = rng.random(min(steps - step + 1, 8192))
            buf_n = len(buf)
            buf_i = 0
        u = buf[buf_i]
        buf_i += 1
        if table is not None:
            total = 0.0
            for c in counts:
                total += table[c]
            if math.isinf(total):
                weights, total = _overflow_weights(counts, feedback)
            else:
                weights = None
            u *= total
            if weights is None:
                acc = 0.0
                chosen = last
                for idx in range(A):
                    acc += table[counts[idx]]
                    if u < acc:
                        chosen = idx
                        break
            else:
                chosen = _select_bin(weights, u)
        else:
            try:
                weights = [feedback(c) for c in counts]
                total = 0.0
                for w in weights:
                    total += w
            except NumericRangeError:
                total = math.inf
            if math.isinf(total):
                weights, total = _overflow_weights(counts, feedback)
            chosen = _select_bin(weights, u * total)
        counts[chosen] += 1
        if observer is not None:
            observer(step, counts)
    return UrnState(tuple(counts), initial.step + steps)


def _overflow_weights(counts, feedback):
    try:
        logs = [feedback.log_value(c) for c in counts]
    except NumericRangeError:
        raise NumericRangeError(
            "feedback weight sum overflows float64 and no log form is "
            "available; rescale the feedback function") from None
    top = max(logs)
    weights = [math.exp(l - top) for l in logs]
    total = 0.0
    for w in weights:
        total += w
    return weights, total


class UrnTrajectoryRecorder:
    """Observer that keeps ``(step, counts...)`` rows for CSV export."""

    def __init__(self, initial=None):
        self.rows = []
        if initial is not None:
            self.rows.append((initial.step, *initial.counts))

    def __call__(self, step, counts):
        self.rows.append((step, *counts))

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            width = len(self.rows[0]) - 1 if self.rows else 0
            writer.writerow(["step"] + [f"count{i}" for i in range(width)])
            writer.writerows(self.rows)


# ---------------------------------------------------------------------------
# Coupling of the urn to the exponential race

@dataclass
class CouplingReport:
    """Exact vs. simulated distribution of the first ``k`` reinforced bins."""

    num_bins: int
    k: int
    replicates: int
    arithmetic: str               # "rational" or "float"
    probabilities: list           # exact P(sequence), lexicographic by sequence
    observed: list                # simulated counts, same order
    chi_square: float
    degrees_of_freedom: int
    p_value: float

    def to_json(self):
        probs = [str(p) if isinstance(p, Fraction) else p for p in self.probabilities]
        return {
            "num_bins": self.num_bins,
            "k": self.k,
            "replicates": self.replicates,
            "arithmetic": self.arithmetic,
            "probabilities": probs,
            "observed": list(self.observed),
            "chi_square": self.chi_square,
            "degrees_of_freedom": self.degrees_of_freedom,
            "p_value": self.p_value,
        }


def exact_sequence_distribution(feedback, initial_counts, k):
    """Exact probability of every length-``k`` bin sequence under the urn recursion.

    Returns ``(probs, arithmetic)`` with ``probs`` indexed lexicographically
    by sequence (bin indices, most significant first).  Uses rational
    arithmetic whenever the feedback has exact rational values on the visited
    count range, floating point otherwise.
    """
    counts0 = tuple(int(c) for c in initial_counts)
    A = len(counts0)
    if k * math.log2(A) > _ENUM_BITS:
        raise ValueError(f"outcome space {A}**{k} too large to enumerate "
                         f"(needs at most {_ENUM_BITS} bits)")
    needed = range(min(counts0), max(counts0) + k)
    exact_vals = {c: feedback.exact(c) for c in needed}
    rational = all(v is not None for v in exact_vals.values())
    weight = (lambda c: exact_vals[c]) if rational else (lambda c: feedback(c))
    one = Fraction(1) if rational else 1.0

    probs = []
    for seq in product(range(A), repeat=k):
        counts = list(counts0)
        p = one
        for a in seq:
            w = [weight(c) for c in counts]
            p = p * w[a] / sum(w)
            counts[a] += 1
        probs.append(p)
    return probs, ("rational" if rational else "float")


def coupling_equivalence_test(feedback, initial_counts, k, replicates, rng):
    """Compare the urn's exact k-step law with the simulated exponential race.

    Enumerates the exact probability of every length-``k`` bin sequence under
    the urn recursion, then simulates ``replicates`` races with exponential
    rates ``feedback(value)`` started from ``initial_counts``, reads the first
    ``k`` jumping agents from each, and reports observed versus exact
    frequencies with a chi-square statistic on ``A**k - 1`` degrees of
    freedom.
    """
    counts0 = tuple(int(c) for c in initial_counts)
    A = len(counts0)
    k = int(k)
    if k < 1:
        raise ValueError("k must be >= 1")
    replicates = int(replicates)
    if replicates < 10_000:
        raise ValueError("need at least 10**4 replicates for a stable chi-square")
    probs, arithmetic = exact_sequence_distribution(feedback, counts0, k)

    model = make_exponential_model(feedback)
    config = RaceConfig(A, counts0, model, EventHorizon(k), seed=0)
    observed = np.zeros(A ** k, dtype=np.int64)
    jumpers = []
    collect = lambda t, a, values: jumpers.append(a)
    for _ in range(replicates):
        jumpers.clear()
        simulate_race(config, rng=rng, observer=collect, record=False)
        code = 0
        for a in jumpers:
            code = code * A + a
        observed[code] += 1

    expected = np.array([float(p) for p in probs]) * replicates
    stat = float(np.sum((observed - expected) ** 2 / expected))
    dof = A ** k - 1
    p_value = float(chi2_dist.sf(stat, dof))
    return CouplingReport(A, k, replicates, arithmetic, probs,
                          observed.tolist(), stat, dof, p_value)
