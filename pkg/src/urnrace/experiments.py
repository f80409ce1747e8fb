"""Named, reproducible experiments over urns and races.

An :class:`ExperimentSpec` pins everything a run depends on: the kind, its
parameters (feedback and model given as the textual grammar of
:mod:`urnrace.increments`), the replicate count, and the master seed.
Replicate ``i`` always draws from the stream derived from
``(master_seed, i)``, so results are bit-identical across worker counts and
across the vectorized/sequential urn engines.

Kinds:

* ``coverage``        -- which value orderings an urn realizes, and when;
* ``xi_convergence``  -- mean rank weights of race snapshots over time;
* ``coupling``        -- urn recursion vs. exponential-race jump chain;
* ``petrov``          -- concentration-versus-dispersion boundedness table;
* ``regime``          -- dispersion-series verdict, plus an optional
  leader-fixation probe of the urn.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from . import dispersion, montecarlo, ranking, urn as urn_mod
from .errors import NumericRangeError
from .increments import parse_feedback, parse_model
from .montecarlo import ExperimentResult, derive_rng, wilson_interval
from .ranking import PermutationCoverage

EXPERIMENT_KINDS = ("coverage", "xi_convergence", "coupling", "petrov", "regime")

_LOCKSTEP_MAX_AGENTS = 4  # beyond this the mask table outgrows its usefulness


@dataclass(frozen=True)
class ExperimentSpec:
    """Everything that determines an experiment's results, and nothing else.

    ``params`` is a JSON-able mapping whose keys depend on ``kind``; the
    output path deliberately stays outside the reproducibility contract.
    """

    kind: str
    params: dict
    replicates: int
    master_seed: int
    output_path: str = None

    def __post_init__(self):
        if self.kind not in EXPERIMENT_KINDS:
            raise ValueError(f"unknown experiment kind {self.kind!r}; "
                             f"expected one of {EXPERIMENT_KINDS}")
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")

    def to_json(self):
        return {"kind": self.kind, "params": dict(self.params),
                "replicates": self.replicates, "master_seed": self.master_seed}


def run_experiment(spec, workers=1):
    """Execute the spec and return an :class:`ExperimentResult`.

    If ``spec.output_path`` is set the result is persisted there after the
    computation finishes; an I/O failure then raises with the computed result
    retained on the exception.
    """
    runner = {
        "coverage": _run_coverage,
        "xi_convergence": _run_xi_convergence,
        "coupling": _run_coupling,
        "petrov": _run_petrov,
        "regime": _run_regime,
    }[spec.kind]
    rows, summary = runner(spec, workers)
    result = ExperimentResult(spec=spec.to_json(), rows=rows, summary=summary)
    if spec.output_path:
        montecarlo.persist_results(result, spec.output_path)
    return result


# ---------------------------------------------------------------------------
# Lockstep urn engine: all replicates advance together, one numpy step at a
# time, each consuming its own derived stream exactly as a sequential run
# would.  Bit-identical to per-replicate run_urn, several times faster.

class _LazyMaskTable:
    """Pairwise-comparison code -> coverage bitmask, filled on first sight."""

    def __init__(self, num_agents, policy):
        self.num_agents = num_agents
        self.policy = policy
        self.pairs = list(combinations(range(num_agents), 2))
        self.table = np.full(3 ** len(self.pairs), -1, dtype=np.int64)

    def codes_for(self, counts):
        codes = np.zeros(len(counts), dtype=np.int64)
        for i, j in self.pairs:
            codes *= 3
            codes += np.sign(counts[:, i] - counts[:, j]) + 1
        return codes

    def masks_for(self, counts):
        codes = self.codes_for(counts)
        unknown = np.flatnonzero(self.table[codes] < 0)
        for r in unknown:
            code = codes[r]
            if self.table[code] >= 0:
                continue
            values = tuple(int(v) for v in counts[r])
            if self.policy == "strict":
                if len(set(values)) != self.num_agents:
                    self.table[code] = 0
                else:
                    order = tuple(sorted(range(self.num_agents),
                                         key=lambda a: -values[a]))
                    self.table[code] = 1 << ranking.perm_rank(order)
            else:
                pattern = ranking._dense_pattern(values)
                self.table[code] = ranking._consistent_mask(self.num_agents, pattern)
        return self.table[codes]


class _CoverageVisitor:
    def __init__(self, num_agents, policy, replicates):
        if math.factorial(num_agents) > 63:
            raise ValueError("lockstep coverage supports at most 4 agents")
        self.masks = _LazyMaskTable(num_agents, policy)
        self.num_perms = math.factorial(num_agents)
        self.seen = np.zeros(replicates, dtype=np.int64)
        self.first_hit = np.full((replicates, self.num_perms), -1, dtype=np.int64)

    def after_step(self, step, counts):
        masks = self.masks.masks_for(counts)
        new = masks & ~self.seen
        if new.any():
            for r in np.flatnonzero(new):
                bits = int(new[r])
                while bits:
                    low = bits & (-bits)
                    self.first_hit[r, low.bit_length() - 1] = step
                    bits ^= low
            self.seen |= masks

    def trackers(self):
        out = []
        for r in range(len(self.seen)):
            tracker = PermutationCoverage(self.masks.num_agents, self.masks.policy)
            tracker.seen = int(self.seen[r])
            tracker.first_hit = {rank: int(s) for rank, s in enumerate(self.first_hit[r])
                                 if s >= 0}
            out.append(tracker)
        return out


class _FixationVisitor:
    def __init__(self, checkpoints, replicates):
        self.checkpoints = sorted(int(c) for c in checkpoints)
        self._lookup = set(self.checkpoints)
        self.leaders = np.full((replicates, len(self.checkpoints)), -1, dtype=np.int64)
        self._index = {c: i for i, c in enumerate(self.checkpoints)}

    def after_step(self, step, counts):
        if step in self._lookup:
            self.leaders[:, self._index[step]] = np.argmax(counts, axis=1)


def _lockstep_urn(feedback, initial, steps, replicates, master_seed, visitors,
                  block=4096):
    """Advance ``replicates`` urns in lockstep for ``steps`` steps.

    Each replicate consumes one uniform per step from its own derived stream,
    and bin selection reproduces the sequential scan arithmetic exactly, so
    the final counts match per-replicate :func:`urnrace.urn.run_urn` calls bit
    for bit.
    """
    initial = tuple(int(c) for c in initial)
    A = len(initial)
    rngs = [derive_rng(master_seed, r) for r in range(replicates)]
    try:
        weights = feedback.weights_array(max(initial) + steps + 1)
    except NumericRangeError:
        raise NumericRangeError(
            "feedback overflows float64 within this run's count range; "
            "use the sequential engine, which renormalizes in log space") from None
    counts = np.tile(np.asarray(initial, dtype=np.int64), (replicates, 1))
    rows = np.arange(replicates)
    uniforms = np.empty((replicates, block))
    done = 0
    while done < steps:
        b = min(block, steps - done)
        for r, gen in enumerate(rngs):
            uniforms[r, :b] = gen.random(b)
        for j in range(b):
            w = weights[counts]
            cum = np.cumsum(w, axis=1)
            scaled = uniforms[:, j] * cum[:, -1]
            idx = (cum <= scaled[:, None]).sum(axis=1)
            np.minimum(idx, A - 1, out=idx)
            counts[rows, idx] += 1
            step = done + j + 1
            for visitor in visitors:
                visitor.after_step(step, counts)
        done += b
    return counts


@dataclass(frozen=True)
class _SequentialCoverageTask:
    feedback: object
    initial: tuple
    steps: int
    policy: str
    num_agents: int

    def __call__(self, index, rng):
        tracker = PermutationCoverage(self.num_agents, self.policy)
        urn_mod.run_urn(urn_mod.UrnState(self.initial), self.feedback, self.steps,
                        rng, observer=lambda step, counts: tracker.update(counts, step))
        return tracker


# ---------------------------------------------------------------------------
# Kind runners

def _run_coverage(spec, workers):
    p = dict(spec.params)
    num_agents = int(p["agents"])
    feedback = parse_feedback(p["feedback"])
    steps = int(p["steps"])
    policy = p.get("policy", "weak")
    initial = tuple(int(c) for c in p.get("initial", (1,) * num_agents))
    engine = p.get("engine", "lockstep" if num_agents <= _LOCKSTEP_MAX_AGENTS
                   else "sequential")

    if engine == "lockstep":
        visitor = _CoverageVisitor(num_agents, policy, spec.replicates)
        _lockstep_urn(feedback, initial, steps, spec.replicates, spec.master_seed,
                      [visitor])
        trackers = visitor.trackers()
    elif engine == "sequential":
        task = _SequentialCoverageTask(feedback, initial, steps, policy, num_agents)
        trackers = montecarlo.map_replicates(task, spec.replicates, spec.master_seed,
                                             workers=workers)
    else:
        raise ValueError(f"unknown engine {engine!r}")

    rows = []
    full_count = 0
    for r, tracker in enumerate(trackers):
        full = tracker.is_full()
        full_count += full
        payload = tracker.to_json()
        rows.append({"replicate": r, "full": full,
                     "seen_count": payload["seen_count"],
                     "first_hit": payload["first_hit"]})
    merged = PermutationCoverage.merge_all(trackers)
    lo, hi = wilson_interval(full_count, spec.replicates)
    summary = {"num_agents": num_agents, "policy": policy, "steps": steps,
               "replicates": spec.replicates, "full_count": full_count,
               "full_fraction": full_count / spec.replicates,
               "wilson_95": [lo, hi], "merged": merged.to_json()}
    return rows, summary


def _parse_model_params(p):
    feedback = parse_feedback(p["feedback"]) if "feedback" in p else None
    family = p.get("family", "exponential")
    return parse_model(family, feedback=feedback)


def _run_xi_convergence(spec, workers):
    p = dict(spec.params)
    num_agents = int(p["agents"])
    model = _parse_model_params(p)
    times = [float(t) for t in p["times"]]
    shift_mode = p.get("shift_mode", "none")
    if shift_mode == "none":
        shifts = None
    elif shift_mode == "uniform":
        shifts = ("uniform", float(p["shift_max"]))
    elif shift_mode == "fixed":
        shifts = [float(s) for s in p["shifts"]]
    else:
        raise ValueError(f"unknown shift_mode {shift_mode!r}")
    report = ranking.xi_convergence_estimate(
        model, num_agents, times, spec.replicates, spec.master_seed,
        shifts=shifts, workers=workers,
        event_cap=int(p.get("event_cap", 1 << 32)))
    payload = report.to_json()
    rows = payload.pop("estimates")
    payload["target"] = 1.0 / math.factorial(num_agents)
    return rows, payload


def _run_coupling(spec, workers):
    p = dict(spec.params)
    feedback = parse_feedback(p["feedback"])
    initial = tuple(int(c) for c in p["initial"])
    k = int(p["k"])
    rng = derive_rng(spec.master_seed, 0)
    report = urn_mod.coupling_equivalence_test(feedback, initial, k,
                                               spec.replicates, rng)
    row = report.to_json()
    summary = {"p_value": report.p_value, "chi_square": report.chi_square,
               "degrees_of_freedom": report.degrees_of_freedom,
               "arithmetic": report.arithmetic}
    return [row], summary


def _run_petrov(spec, workers):
    p = dict(spec.params)
    model = _parse_model_params(p)
    table = dispersion.petrov_probe(
        model, [int(n) for n in p["n_grid"]], float(p.get("lambda", 1.0)),
        int(p.get("samples", 100_000)), derive_rng(spec.master_seed, 0),
        symmetrized=bool(p.get("symmetrized", False)))
    rows = [vars(row) for row in table.rows]
    products = table.products()
    summary = {"lam": table.lam, "symmetrized": table.symmetrized}
    if products:
        summary["product_spread"] = max(products) / min(products)
    return rows, summary


def _run_regime(spec, workers):
    p = dict(spec.params)
    model = _parse_model_params(p)
    lams = p.get("lambda", 1.0)
    if not isinstance(lams, (list, tuple)):
        lams = [lams]
    rows = []
    verdicts = {}
    for lam in lams:
        report = dispersion.three_series_classifier(model, float(lam),
                                                    p.get("j_max"))
        rows.append({"type": "classifier", **report.to_json()})
        verdicts[f"{float(lam):g}"] = report.verdict
    distinct = set(verdicts.values())
    summary = {"verdicts": verdicts,
               "verdict": distinct.pop() if len(distinct) == 1 else "mixed"}

    fixation = p.get("fixation")
    if fixation:
        if "feedback" not in p:
            raise ValueError("the fixation probe runs an urn and needs a feedback function")
        num_agents = int(fixation["agents"])
        checkpoints = [int(c) for c in fixation["checkpoints"]]
        initial = tuple(int(c) for c in fixation.get("initial", (1,) * num_agents))
        visitor = _FixationVisitor(checkpoints, spec.replicates)
        _lockstep_urn(parse_feedback(p["feedback"]), initial, max(checkpoints),
                      spec.replicates, spec.master_seed, [visitor])
        agree = 0
        for r in range(spec.replicates):
            leaders = {str(c): int(visitor.leaders[r, i])
                       for i, c in enumerate(visitor.checkpoints)}
            rows.append({"type": "fixation", "replicate": r, "leaders": leaders})
            agree += visitor.leaders[r, 0] == visitor.leaders[r, -1]
        lo, hi = wilson_interval(int(agree), spec.replicates)
        summary["fixation"] = {"checkpoints": checkpoints,
                               "agreement_count": int(agree),
                               "replicates": spec.replicates,
                               "agreement_fraction": int(agree) / spec.replicates,
                               "wilson_95": [lo, hi]}
    return rows, summary
