"""Replicate orchestration: derived seeds, parallel map, summaries, persistence.

Every replicate draws from its own generator, derived as a pure function of
``(master_seed, replicate_index)`` through ``numpy.random.SeedSequence`` spawn
keys.  Workers never share a stream, so the scheduling of a process pool
cannot perturb results: the same spec and master seed reproduce results bit
for bit at any worker count.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from statistics import NormalDist

import numpy as np

from .errors import ResultPersistenceError, SchemaVersionError

RESULTS_SCHEMA = "urnrace-results"
SCHEMA_VERSION = 1
_SEED_MASK = (1 << 64) - 1


def derive_seed_sequence(master_seed, index):
    """Independent seed material for one replicate; collision-free in the index."""
    return np.random.SeedSequence(int(master_seed) & _SEED_MASK, spawn_key=(int(index),))


def derive_rng(master_seed, index):
    """The generator replicate ``index`` must use under ``master_seed``."""
    return np.random.Generator(np.random.PCG64(derive_seed_sequence(master_seed, index)))


def _call_indexed(fn, master_seed, index):
    return fn(index, derive_rng(master_seed, index))


def map_replicates(fn, replicates, master_seed, workers=1):
    """Run ``fn(index, rng)`` for each replicate and return results in index order.

    With ``workers > 1`` the replicates execute in a process pool; ``fn`` must
    be picklable (a module-level function).  Results are gathered in index
    order regardless of scheduling, so any later reduction sees the same
    operand order at every worker count.
    """
    replicates = int(replicates)
    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    if workers is None or workers <= 1 or replicates == 1:
        return [fn(i, derive_rng(master_seed, i)) for i in range(replicates)]
    chunk = max(1, replicates // (int(workers) * 8))
    with ProcessPoolExecutor(max_workers=int(workers)) as pool:
        return list(pool.map(_call_indexed,
                             [fn] * replicates,
                             [master_seed] * replicates,
                             range(replicates),
                             chunksize=chunk))


def wilson_interval(successes, trials, confidence=0.95):
    """Wilson score interval for a binomial proportion."""
    successes = int(successes)
    trials = int(trials)
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if not 0 <= successes <= trials:
        raise ValueError("successes must lie in [0, trials]")
    if not 0.0 < confidence < 1.0:
        raise ValueError("confidence must lie in (0, 1)")
    z = NormalDist().inv_cdf((1.0 + confidence) / 2.0)
    p_hat = successes / trials
    denom = 1.0 + z * z / trials
    center = (p_hat + z * z / (2.0 * trials)) / denom
    half = z * math.sqrt(p_hat * (1.0 - p_hat) / trials
                         + z * z / (4.0 * trials * trials)) / denom
    return (max(0.0, center - half), min(1.0, center + half))


@dataclass(frozen=True)
class SummaryStats:
    """Mean with a normal-approximation confidence interval.

    ``valid`` is False when more than ``max_exclusion_fraction`` of the
    intended replicates were excluded (e.g. exploded runs): a summary biased
    by silent exclusions must not pass for a clean one.
    """

    mean: float
    stderr: float
    ci_low: float
    ci_high: float
    count: int
    excluded: int
    valid: bool

    @classmethod
    def from_values(cls, values, excluded=0, confidence=0.95,
                    max_exclusion_fraction=0.01):
        values = np.asarray(values, dtype=np.float64)
        n = len(values)
        if n < 1:
            raise ValueError("need at least one value")
        mean = float(np.mean(values))
        stderr = float(np.std(values, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
        z = NormalDist().inv_cdf((1.0 + confidence) / 2.0)
        total = n + excluded
        return cls(mean=mean, stderr=stderr,
                   ci_low=mean - z * stderr, ci_high=mean + z * stderr,
                   count=n, excluded=int(excluded),
                   valid=(excluded / total) <= max_exclusion_fraction)

    def to_json(self):
        return {"mean": self.mean, "stderr": self.stderr,
                "ci_low": self.ci_low, "ci_high": self.ci_high,
                "count": self.count, "excluded": self.excluded,
                "valid": self.valid}


# ---------------------------------------------------------------------------
# Result persistence (JSON lines, versioned header)

@dataclass
class ExperimentResult:
    """Rows plus summary for one experiment run, with the spec that produced it."""

    spec: dict
    rows: list
    summary: dict

    def __eq__(self, other):
        return (isinstance(other, ExperimentResult)
                and self.spec == other.spec
                and self.rows == other.rows
                and self.summary == other.summary)


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def spec_digest(spec):
    return hashlib.sha256(canonical_json(spec).encode()).hexdigest()


def persist_results(result, path):
    """Write an :class:`ExperimentResult` as JSON lines.

    The header line pins the schema version, the full spec, its SHA-256
    digest, and the master seed; each row follows on its own line and a
    non-empty summary closes the file.  Byte-identical for identical results.
    If writing fails the computed result is retained on the raised
    :class:`~urnrace.errors.ResultPersistenceError`.
    """
    header = {
        "schema": RESULTS_SCHEMA,
        "version": SCHEMA_VERSION,
        "spec": result.spec,
        "spec_sha256": spec_digest(result.spec),
        "master_seed": result.spec.get("master_seed"),
    }
    try:
        with open(path, "w", newline="\n") as fh:
            fh.write(canonical_json(header))
            fh.write("\n")
            for row in result.rows:
                fh.write(canonical_json({"row": row}))
                fh.write("\n")
            if result.summary:
                fh.write(canonical_json({"summary": result.summary}))
                fh.write("\n")
    except OSError as exc:
        raise ResultPersistenceError(result, exc) from exc
    return path


def load_results(path):
    """Read back a results file written by :func:`persist_results`.

    Rejects unsupported schema versions and headers whose spec digest no
    longer matches the embedded spec.
    """
    with open(path) as fh:
        lines = [line for line in fh.read().splitlines() if line]
    if not lines:
        raise ValueError(f"{path} is empty")
    header = json.loads(lines[0])
    if header.get("schema") != RESULTS_SCHEMA:
        raise SchemaVersionError(header.get("schema"), RESULTS_SCHEMA)
    if header.get("version") != SCHEMA_VERSION:
        raise SchemaVersionError(header.get("version"), SCHEMA_VERSION)
    if spec_digest(header["spec"]) != header.get("spec_sha256"):
        raise ValueError(f"{path}: header digest does not match the embedded spec; "
                         "file corrupted or tampered with")
    rows = []
    summary = {}
    for line in lines[1:]:
        record = json.loads(line)
        if "row" in record:
            rows.append(record["row"])
        elif "summary" in record:
            summary = record["summary"]
        else:
            raise ValueError(f"{path}: unrecognized record {record!r}")
    return ExperimentResult(spec=header["spec"], rows=rows, summary=summary)
