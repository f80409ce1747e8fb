"""Concentration and dispersion toolkit.

Two functionals drive everything here.  For a real random variable ``Y`` and
window ``lam > 0``:

* concentration ``Q(Y; lam) = sup_x P(x <= Y <= x + lam)``, estimated from a
  sample by the best window over sorted points;
* dispersion ``D(Y; lam) = E[Y^2 1{|Y| <= lam}] / lam^2 + P(|Y| >= lam)``.

Whether the partial sums of ``D`` over symmetrized waiting-time increments
diverge decides the regime of the race: divergence means no agent fixates as
the eventual leader.  :func:`three_series_classifier` reads that off, exactly
where a closed rule exists and numerically otherwise.  :func:`petrov_probe`
checks the companion concentration bound: ``Q`` of a growing sum, multiplied
by the square root of the accumulated ``D``, should stay bounded.

:func:`unimodal_shift_check` verifies, in exact rational arithmetic, the
shift inequality ``|E[h(Y+s)] - E[h(Y)]| <= Q(Y; s)`` for non-decreasing step
functions ``h`` into [0, 1], and the doubled bound for unimodal ``h``.
"""

from __future__ import annotations

import csv
import json
import math
from bisect import bisect_right
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import UnsupportedFamilyError
from .increments import SymmetrizedIncrement, _two_sided_exp_D_vec, analytic_D


def empirical_Q(samples, lam):
    """Plug-in concentration estimate: the best count of samples in a closed
    window of width ``lam``, divided by the sample size.

    Sorts once and sweeps with ``searchsorted``; O(M log M).
    """
    y = np.sort(np.asarray(samples, dtype=np.float64))
    if y.size == 0:
        raise ValueError("need a nonempty sample")
    lam = float(lam)
    if lam < 0 or not math.isfinite(lam):
        raise ValueError("lam must be finite and >= 0")
    counts = np.searchsorted(y, y + lam, side="right") - np.arange(y.size)
    return float(counts.max()) / y.size


def dispersion_D(source, lam):
    """Dispersion of a symmetrized increment (analytic) or of a sample (plug-in).

    Pass a :class:`~urnrace.increments.SymmetrizedIncrement` to route to the
    registered analytic form; pass an array of draws for the empirical
    estimate.
    """
    lam = float(lam)
    if not (lam > 0 and math.isfinite(lam)):
        raise ValueError("lam must be positive and finite")
    if isinstance(source, SymmetrizedIncrement):
        return analytic_D(source.model, source.level, lam)
    y = np.asarray(source, dtype=np.float64)
    if y.size == 0:
        raise ValueError("need a nonempty sample")
    second = float(np.mean(y * y * (np.abs(y) <= lam)))
    tail = float(np.mean(np.abs(y) >= lam))
    return second / (lam * lam) + tail


# ---------------------------------------------------------------------------
# Divergence classification of the dispersion series

@dataclass
class DispersionReport:
    """Partial dispersion sums over levels with a divergence verdict.

    ``verdict`` is ``diverges``, ``converges``, or ``inconclusive``; the
    ``evidence`` mapping records the exact rule applied (if any), the
    numeric slope/plateau diagnostics, and whether the two agree.
    """

    lam: float
    levels: list
    partial_sums: list
    verdict: str
    evidence: dict

    def to_json(self):
        return {"lam": self.lam, "levels": list(self.levels),
                "partial_sums": list(self.partial_sums),
                "verdict": self.verdict, "evidence": dict(self.evidence)}


def _level_D_values(model, j_max, lam):
    """D of the symmetrized increment at levels 1..j_max, vectorized when possible."""
    if model.family == "exponential":
        rates = model.feedback.weights_array(j_max)
        return _two_sided_exp_D_vec(rates * lam)
    if not model.level_dependent():
        d = analytic_D(model, 1, lam)
        return np.full(j_max, d)
    return np.array([analytic_D(model, j, lam) for j in range(1, j_max + 1)])


def _default_j_max(model):
    # per-level quadrature families get a shorter default grid
    return 2000 if model.family == "gamma" else 100_000


_SLOPE_THRESHOLD = 0.05
_PLATEAU_FRACTION = 0.01
_FIT_R2 = 0.9


def three_series_classifier(model, lam=1.0, j_max=None):
    """Classify whether the dispersion series over levels diverges.

    Computes partial sums of ``D`` at the symmetrized increments on a
    geometric level grid up to ``j_max``.  For the exponential family with
    power feedback the exact rule applies: the series diverges if and only if
    the exponent is at most 1/2.  Families whose increments do not depend on
    the level are exact too: any positive constant term diverges, a degenerate
    increment converges.  Otherwise the verdict comes from a log-log slope fit
    over the top decade of the grid, and ``inconclusive`` is an honest answer,
    not an error.  The verdict is window-independent; ``lam`` only scales the
    evidence.
    """
    lam = float(lam)
    if not (lam > 0 and math.isfinite(lam)):
        raise ValueError("lam must be positive and finite")
    if j_max is None:
        j_max = _default_j_max(model)
    j_max = int(j_max)
    if j_max < 1000:
        raise ValueError("j_max must be at least 1000")

    d_values = _level_D_values(model, j_max, lam)
    cumulative = np.cumsum(d_values)
    levels = np.unique(np.round(np.geomspace(1, j_max, 80)).astype(int))
    partial = cumulative[levels - 1]

    numeric, diagnostics = _numeric_verdict(levels, partial)
    exact_rule, exact_verdict = _exact_rule(model, d_values)
    verdict = exact_verdict if exact_verdict is not None else numeric
    evidence = {"exact_rule": exact_rule, "numeric_verdict": numeric,
                "agrees": None if exact_verdict is None else (numeric == exact_verdict)}
    evidence.update(diagnostics)
    return DispersionReport(lam, levels.tolist(), partial.tolist(), verdict, evidence)


def _exact_rule(model, d_values):
    if model.family == "exponential":
        fb = model.feedback
        if fb.kind == "power":
            if fb.exponent <= 0.5:
                return (f"power feedback exponent {fb.exponent:g} <= 1/2: "
                        "inverse-square weight sum diverges"), "diverges"
            return (f"power feedback exponent {fb.exponent:g} > 1/2: "
                    "inverse-square weight sum converges"), "converges"
        if fb.kind == "constant":
            return "constant feedback: identical positive terms", "diverges"
        return None, None
    if not model.level_dependent():
        if d_values[0] == 0.0:
            return "degenerate symmetrized increment: every term is 0", "converges"
        return "level-independent increments: identical positive terms", "diverges"
    return None, None


def _numeric_verdict(levels, partial):
    top = levels >= levels[-1] / 10
    x = np.log(levels[top].astype(np.float64))
    y = partial[top]
    diagnostics = {"slope": None, "plateau_fraction": None, "r_squared": None}
    if y[-1] <= 0.0:
        return "converges", diagnostics
    plateau = (y[-1] - y[0]) / y[-1]
    diagnostics["plateau_fraction"] = float(plateau)
    if plateau <= _PLATEAU_FRACTION:
        return "converges", diagnostics
    logy = np.log(y)
    slope, intercept = np.polyfit(x, logy, 1)
    fitted = slope * x + intercept
    ss_res = float(np.sum((logy - fitted) ** 2))
    ss_tot = float(np.sum((logy - logy.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    diagnostics["slope"] = float(slope)
    diagnostics["r_squared"] = r2
    if slope > _SLOPE_THRESHOLD and r2 >= _FIT_R2:
        return "diverges", diagnostics
    return "inconclusive", diagnostics


# ---------------------------------------------------------------------------
# Boundedness probe for the concentration of growing sums

@dataclass
class PetrovRow:
    n: int
    q_hat: float
    sum_d: float
    product: float
    vacuous: bool


@dataclass
class PetrovTable:
    """Evidence that ``Q(S_n; lam) * sqrt(sum of D)`` stays bounded in ``n``.

    The bounding constant itself is unknowable; what the table can show is
    that the product neither grows nor decays across the grid.  Rows with
    ``sum_d == 0`` (degenerate increments) are flagged vacuous: the bound
    says nothing there, and ``q_hat`` is 1.
    """

    lam: float
    symmetrized: bool
    rows: list

    def products(self):
        return [row.product for row in self.rows if not row.vacuous]

    def to_json(self):
        return {"lam": self.lam, "symmetrized": self.symmetrized,
                "rows": [vars(row) for row in self.rows]}

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["n", "Q_hat", "sum_D", "product"])
            for row in self.rows:
                writer.writerow([row.n, repr(row.q_hat), repr(row.sum_d),
                                 repr(row.product)])


def petrov_probe(model, n_grid, lam, num_samples, rng, symmetrized=False):
    """Tabulate the concentration of ``S_n`` against accumulated dispersion.

    Simulates ``num_samples`` independent paths of the running sum of waits
    (or of symmetrized waits), evaluates the plug-in concentration at each
    ``n`` in the increasing grid, and pairs it with the analytic dispersion
    sum over the same levels.
    """
    n_grid = [int(n) for n in n_grid]
    if not n_grid or any(b <= a for a, b in zip(n_grid, n_grid[1:])) or n_grid[0] < 1:
        raise ValueError("n_grid must be increasing positive integers")
    num_samples = int(num_samples)
    if num_samples < 100_000:
        raise ValueError("need at least 10**5 sample paths")
    lam = float(lam)
    if not (lam > 0 and math.isfinite(lam)):
        raise ValueError("lam must be positive and finite")

    d_sums = np.cumsum(_level_D_values(model, n_grid[-1], lam))
    sums = np.zeros(num_samples)
    rows = []
    grid_iter = iter(n_grid)
    target = next(grid_iter)
    for level in range(1, n_grid[-1] + 1):
        draw = model.sample_many(level, num_samples, rng)
        if symmetrized:
            draw = draw - model.sample_many(level, num_samples, rng)
        sums += draw
        if level == target:
            q_hat = empirical_Q(sums, lam)
            sum_d = float(d_sums[level - 1])
            rows.append(PetrovRow(level, q_hat, sum_d,
                                  q_hat * math.sqrt(sum_d), sum_d == 0.0))
            target = next(grid_iter, None)
            if target is None:
                break
    return PetrovTable(lam, symmetrized, rows)


# ---------------------------------------------------------------------------
# Exact discrete distributions and step functions

@dataclass(frozen=True)
class DiscreteDistribution:
    """Finitely supported distribution with exact rational weights."""

    support: tuple
    probabilities: tuple

    def __post_init__(self):
        support = tuple(Fraction(s) for s in self.support)
        probs = tuple(Fraction(p) for p in self.probabilities)
        if len(support) != len(probs) or not support:
            raise ValueError("support and probabilities must be nonempty and equal length")
        if any(b <= a for a, b in zip(support, support[1:])):
            raise ValueError("support must be strictly increasing")
        if any(p <= 0 for p in probs):
            raise ValueError("probabilities must be positive")
        if sum(probs) != 1:
            raise ValueError(f"probabilities sum to {sum(probs)}, not 1")
        object.__setattr__(self, "support", support)
        object.__setattr__(self, "probabilities", probs)

    @classmethod
    def uniform(cls, points):
        points = tuple(points)
        return cls(points, (Fraction(1, len(points)),) * len(points))

    def expectation(self, fn):
        """Exact expectation of ``fn`` over the support."""
        return sum((p * Fraction(fn(y)) for y, p in zip(self.support, self.probabilities)),
                   Fraction(0))

    def concentration(self, width):
        """Exact ``Q``: the best window ``[y, y + width]`` anchored at a support point.

        Anchoring left ends at support points loses nothing: sliding any
        window right until it hits its smallest contained point keeps every
        point it covered.
        """
        width = Fraction(width)
        if width < 0:
            raise ValueError("width must be >= 0")
        best = Fraction(0)
        for i, left in enumerate(self.support):
            mass = Fraction(0)
            for y, p in zip(self.support[i:], self.probabilities[i:]):
                if y > left + width:
                    break
                mass += p
            if mass > best:
                best = mass
        return best

    def shifted(self, s):
        return DiscreteDistribution(tuple(y + Fraction(s) for y in self.support),
                                    self.probabilities)


@dataclass(frozen=True)
class StepFunction:
    """Right-continuous step function given by breakpoints and values in [0, 1].

    ``h(y)`` is the value at the last breakpoint at or before ``y``; below the
    first breakpoint it equals the first value.  ``domain`` optionally
    declares the interval ``[a, b]`` the function is considered on, as the
    unimodal shift check requires.
    """

    breakpoints: tuple
    values: tuple
    domain: tuple = None

    def __post_init__(self):
        points = tuple(Fraction(x) for x in self.breakpoints)
        values = tuple(Fraction(v) for v in self.values)
        if len(points) != len(values) or not points:
            raise ValueError("breakpoints and values must be nonempty and equal length")
        if any(b <= a for a, b in zip(points, points[1:])):
            raise ValueError("breakpoints must be strictly increasing")
        if any(v < 0 or v > 1 for v in values):
            raise ValueError("step values must lie in [0, 1]")
        domain = self.domain
        if domain is not None:
            domain = (Fraction(domain[0]), Fraction(domain[1]))
            if domain[0] > points[0] or domain[1] < points[-1]:
                raise ValueError("domain must contain all breakpoints")
        object.__setattr__(self, "breakpoints", points)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "domain", domain)

    def __call__(self, y):
        y = Fraction(y)
        idx = bisect_right(self.breakpoints, y)
        return self.values[0] if idx == 0 else self.values[idx - 1]

    def is_non_decreasing(self):
        return all(b >= a for a, b in zip(self.values, self.values[1:]))

    def is_unimodal(self):
        """Non-decreasing up to some peak, non-increasing after it."""
        peak = self.values.index(max(self.values))
        head = self.values[:peak + 1]
        tail = self.values[peak:]
        return (all(b >= a for a, b in zip(head, head[1:]))
                and all(b <= a for a, b in zip(tail, tail[1:])))


@dataclass(frozen=True)
class ShiftCheckReport:
    lhs: Fraction
    q: Fraction
    bound: Fraction
    passed: bool
    shape: str

    def to_json(self):
        return {"lhs": str(self.lhs), "q": str(self.q), "bound": str(self.bound),
                "passed": self.passed, "shape": self.shape}


def unimodal_shift_check(h, dist, shift, shape="increasing"):
    """Exact check of the shift inequality for a step function against a
    discrete distribution.

    ``shape='increasing'`` requires ``h`` non-decreasing and checks
    ``|E[h(Y+s)] - E[h(Y)]| <= Q(Y; s)``.  ``shape='unimodal'`` requires a
    unimodal ``h`` with a declared domain ``[a, b]``, requires ``Y`` supported
    on ``[a, b - s]``, and checks the doubled bound.  Everything is computed
    in exact rationals; the report never involves floats.
    """
    shift = Fraction(shift)
    if shift <= 0:
        raise ValueError("shift must be positive")
    if shape == "increasing":
        if not h.is_non_decreasing():
            raise ValueError("shape='increasing' requires a non-decreasing step function")
    elif shape == "unimodal":
        if not h.is_unimodal():
            raise ValueError("shape='unimodal' requires a unimodal step function")
        if h.domain is None:
            raise ValueError("the unimodal check needs the function's domain [a, b]")
        a, b = h.domain
        if dist.support[0] < a or dist.support[-1] > b - shift:
            raise ValueError(
                "support hypothesis violated: the unimodal bound needs the "
                f"distribution supported on [a, b - s] = [{a}, {b - shift}]")
    else:
        raise ValueError("shape must be 'increasing' or 'unimodal'")

    lhs = dist.expectation(lambda y: h(y + shift)) - dist.expectation(h)
    q = dist.concentration(shift)
    bound = q if shape == "increasing" else 2 * q
    return ShiftCheckReport(lhs, q, bound, abs(lhs) <= bound, shape)


# ---------------------------------------------------------------------------
# Randomized exact trials for the shift inequality

def _random_fraction(rng, lo, hi, max_denominator=8):
    den = int(rng.integers(1, max_denominator + 1))
    num = int(rng.integers(int(lo * den), int(hi * den) + 1))
    return Fraction(num, den)


def _random_distribution(rng, lo, hi, max_points=12):
    n = int(rng.integers(1, max_points + 1))
    points = set()
    while len(points) < n:
        points.add(_random_fraction(rng, lo, hi))
    weights = [int(rng.integers(1, 21)) for _ in range(len(points))]
    total = sum(weights)
    return DiscreteDistribution(tuple(sorted(points)),
                                tuple(Fraction(w, total) for w in weights))


def random_monotone_case(rng):
    """A random non-decreasing step function, distribution, and shift."""
    g = int(rng.integers(1, 9))
    points = set()
    while len(points) < g:
        points.add(_random_fraction(rng, -12, 12))
    raw = sorted(Fraction(int(rng.integers(0, 65)), 64) for _ in range(g))
    h = StepFunction(tuple(sorted(points)), tuple(raw))
    dist = _random_distribution(rng, -12, 12)
    shift = _random_fraction(rng, 0, 12) + Fraction(1, 16)
    return h, dist, shift


def random_unimodal_case(rng):
    """A random unimodal step function on a domain, with a compatible
    distribution and shift satisfying the support hypothesis."""
    g = int(rng.integers(1, 9))
    points = set()
    while len(points) < g:
        points.add(_random_fraction(rng, -12, 12))
    points = sorted(points)
    raw = [Fraction(int(rng.integers(0, 65)), 64) for _ in range(g)]
    peak = int(rng.integers(0, g))
    ascend = sorted(raw[:peak + 1])
    top = ascend[-1]
    descend = [min(v, top) for v in sorted(raw[peak + 1:], reverse=True)]
    h_values = tuple(ascend + descend)
    a = points[0] - _random_fraction(rng, 0, 3)
    b = points[-1] + _random_fraction(rng, 0, 3) + Fraction(1, 2)
    width = b - a
    shift = width * Fraction(int(rng.integers(1, 8)), 16)
    lo, hi = a, b - shift
    span = hi - lo
    n = int(rng.integers(1, 13))
    support = set()
    while len(support) < n:
        frac = Fraction(int(rng.integers(0, 33)), 32)
        support.add(lo + span * frac)
    weights = [int(rng.integers(1, 21)) for _ in range(len(support))]
    total = sum(weights)
    dist = DiscreteDistribution(tuple(sorted(support)),
                                tuple(Fraction(w, total) for w in weights))
    h = StepFunction(tuple(points), h_values, domain=(a, b))
    return h, dist, shift


@dataclass
class FuzzReport:
    trials: int
    violations: list

    @property
    def passed(self):
        return not self.violations

    def to_json(self):
        return {"trials": self.trials, "passed": self.passed,
                "violations": self.violations}


def run_unimodal_fuzz(trials, master_seed, shape="increasing"):
    """Run randomized exact trials of the shift inequality; report violations.

    A single violation would falsify the inequality the whole dispersion
    argument rests on, so callers should treat any non-empty violation list
    as a build-stopping bug, not statistical noise.
    """
    if shape not in ("increasing", "unimodal"):
        raise ValueError("shape must be 'increasing' or 'unimodal'")
    rng = np.random.default_rng(int(master_seed))
    make = random_monotone_case if shape == "increasing" else random_unimodal_case
    violations = []
    for trial in range(int(trials)):
        h, dist, shift = make(rng)
        report = unimodal_shift_check(h, dist, shift, shape=shape)
        if not report.passed:
            violations.append({"trial": trial, "shape": shape,
                               "lhs": str(report.lhs), "q": str(report.q),
                               "breakpoints": [str(x) for x in h.breakpoints],
                               "values": [str(v) for v in h.values],
                               "support": [str(y) for y in dist.support],
                               "probabilities": [str(p) for p in dist.probabilities],
                               "shift": str(shift)})
    return FuzzReport(int(trials), violations)
