"""Waiting-time distributions and their dispersion ingredients.

A :class:`FeedbackFunction` maps a count ``m >= 0`` to a positive weight.
Under the exponential embedding the same function supplies the rate of the
level-``j`` waiting time, ``rate(j) = f(j - 1)``.  A :class:`WaitingTimeModel`
bundles a distribution family with its per-level parameters; levels are
indexed from 1, so the level-``j`` draw is the wait for a value to move from
``j - 1`` to ``j``.

Model specifications can be written as short strings (``power:0.5``,
``detuniform:base=1,jitter=0.5`` ...) and parsed back with
:func:`parse_feedback` / :func:`parse_model`; see the function docstrings for
the grammar.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy import integrate, special

from .errors import NumericRangeError, UnsupportedFamilyError

DEFAULT_MEMO_CAP = 1 << 24

_FEEDBACK_KINDS = ("power", "constant", "tabulated", "custom")
_TAIL_RULES = ("repeat-last", "power-extrapolate")


class FeedbackFunction:
    """Positive weight as a function of a nonnegative integer count.

    Kinds:

    * ``power(p)``     -- ``f(m) = (m + 1) ** p``.  The ``+1`` offset is
      deliberate: it keeps ``f(0) > 0`` for every exponent.
    * ``constant(c)``  -- ``f(m) = c`` with ``c > 0``.
    * ``tabulated(values, tail)`` -- explicit positive table; beyond the table
      either the last entry repeats (``repeat-last``) or a power law fitted to
      the last two entries extrapolates (``power-extrapolate``).
    * ``custom(fn)``   -- arbitrary callable, validated to be positive and
      finite at every evaluated count.

    Evaluations are memoized up to ``memo_cap`` counts (default ``2**24``);
    beyond the cap values are recomputed on demand without caching.
    Instances are immutable apart from the internal cache and safe to share
    across threads.
    """

    __slots__ = ("kind", "exponent", "const", "table", "tail", "fn", "memo_cap",
                 "_memo", "_lock", "_tail_coeff", "_tail_exp")

    def __init__(self, kind, *, exponent=None, const=None, table=None,
                 tail=None, fn=None, memo_cap=DEFAULT_MEMO_CAP):
        if kind not in _FEEDBACK_KINDS:
            raise ValueError(f"unknown feedback kind {kind!r}")
        self.kind = kind
        self.exponent = exponent
        self.const = const
        self.table = tuple(table) if table is not None else None
        self.tail = tail
        self.fn = fn
        self.memo_cap = int(memo_cap)
        self._memo = []
        self._lock = threading.Lock()
        self._tail_coeff = None
        self._tail_exp = None
        self._validate_params()

    # -- constructors -------------------------------------------------------

    @classmethod
    def power(cls, p, memo_cap=DEFAULT_MEMO_CAP):
        """Weight ``(m + 1) ** p``."""
        return cls("power", exponent=float(p), memo_cap=memo_cap)

    @classmethod
    def constant(cls, c, memo_cap=DEFAULT_MEMO_CAP):
        """Constant positive weight."""
        return cls("constant", const=c, memo_cap=memo_cap)

    @classmethod
    def tabulated(cls, values, tail="repeat-last", memo_cap=DEFAULT_MEMO_CAP):
        """Explicit table of positive weights with a tail rule."""
        return cls("tabulated", table=values, tail=tail, memo_cap=memo_cap)

    @classmethod
    def custom(cls, fn, memo_cap=DEFAULT_MEMO_CAP):
        """Wrap an arbitrary callable ``m -> weight``."""
        return cls("custom", fn=fn, memo_cap=memo_cap)

    def _validate_params(self):
        if self.kind == "power":
            if not math.isfinite(self.exponent):
                raise ValueError("power exponent must be finite")
        elif self.kind == "constant":
            c = float(self.const)
            if not (c > 0.0 and math.isfinite(c)):
                raise ValueError("constant feedback must be positive and finite")
        elif self.kind == "tabulated":
            if not self.table:
                raise ValueError("tabulated feedback needs at least one value")
            if any(not (float(v) > 0.0 and math.isfinite(float(v))) for v in self.table):
                raise ValueError("tabulated feedback values must all be positive and finite")
            if self.tail not in _TAIL_RULES:
                raise ValueError(f"tail rule must be one of {_TAIL_RULES}, got {self.tail!r}")
            if self.tail == "power-extrapolate":
                if len(self.table) < 2:
                    raise ValueError("power-extrapolate needs at least two tabulated values")
                length = len(self.table)
                v_last, v_prev = float(self.table[-1]), float(self.table[-2])
                self._tail_exp = math.log(v_last / v_prev) / math.log(length / (length - 1))
                self._tail_coeff = v_last
        elif self.kind == "custom":
            if not callable(self.fn):
                raise ValueError("custom feedback needs a callable")

    # -- evaluation ---------------------------------------------------------

    def _compute_range(self, lo, hi):
        """Raw weights for counts ``lo..hi-1`` as float64, unvalidated.

        All evaluation paths (scalar, memo extension, bulk arrays) share this
        routine so they agree bit for bit.
        """
        if self.kind == "power":
            with np.errstate(over="ignore"):
                return (np.arange(lo, hi, dtype=np.float64) + 1.0) ** self.exponent
        if self.kind == "constant":
            return np.full(hi - lo, float(self.const))
        if self.kind == "tabulated":
            out = np.empty(hi - lo)
            length = len(self.table)
            head = max(0, min(hi, length) - lo)
            if head:
                out[:head] = [float(v) for v in self.table[lo:lo + head]]
            if lo + head < hi:
                start = max(lo, length)
                if self.tail == "repeat-last":
                    out[head:] = float(self.table[-1])
                else:
                    m1 = np.arange(start, hi, dtype=np.float64) + 1.0
                    out[head:] = self._tail_coeff * (m1 / length) ** self._tail_exp
            return out
        return np.array([float(self.fn(m)) for m in range(lo, hi)], dtype=np.float64)

    @staticmethod
    def _check_value(value, m):
        if math.isinf(value):
            raise NumericRangeError(f"feedback weight at count {m} overflows float64")
        if not value > 0.0 or math.isnan(value):
            raise ValueError(f"feedback weight at count {m} is {value}; weights must be positive")
        return value

    def _extend_memo(self, n):
        """Grow the cache so it covers counts ``0..n-1`` (n <= memo_cap)."""
        with self._lock:
            have = len(self._memo)
            if have >= n:
                return
            target = min(self.memo_cap, max(n, 2 * have, 16))
            self._memo.extend(self._compute_range(have, target).tolist())

    def __call__(self, m):
        m = int(m)
        if m < 0:
            raise ValueError("feedback is defined on counts >= 0")
        if m < self.memo_cap:
            if m >= len(self._memo):
                self._extend_memo(m + 1)
            value = self._memo[m]
        else:
            value = float(self._compute_range(m, m + 1)[0])
        return self._check_value(value, m)

    def values_upto(self, n):
        """Cached list of weights for counts ``0..n-1``; validated.

        Returns the internal memo list when ``n`` fits under the cap, so a
        caller holding the reference sees later extensions in place.  Treat it
        as read-only.
        """
        n = int(n)
        if n <= self.memo_cap:
            self._extend_memo(n)
            values = self._memo
        else:
            values = self._compute_range(0, n).tolist()
        self._check_array(np.asarray(values[:n]))
        return values

    @staticmethod
    def _check_array(arr):
        if np.isinf(arr).any():
            m = int(np.flatnonzero(np.isinf(arr))[0])
            raise NumericRangeError(f"feedback weight at count {m} overflows float64")
        if not (arr > 0.0).all() or np.isnan(arr).any():
            bad = np.flatnonzero(~(arr > 0.0) | np.isnan(arr))
            m = int(bad[0])
            raise ValueError(f"feedback weight at count {m} is {arr[m]}; weights must be positive")

    def weights_array(self, n):
        """Weights for counts ``0..n-1`` as a float64 array; validated."""
        n = int(n)
        if n <= self.memo_cap:
            self._extend_memo(n)
            arr = np.array(self._memo[:n], dtype=np.float64)
        else:
            arr = self._compute_range(0, n)
        self._check_array(arr)
        return arr

    def log_value(self, m):
        """``log f(m)`` computed without forming ``f(m)``, for overflow-safe weights."""
        m = int(m)
        if m < 0:
            raise ValueError("feedback is defined on counts >= 0")
        if self.kind == "power":
            return self.exponent * math.log(m + 1)
        if self.kind == "constant":
            return math.log(float(self.const))
        if self.kind == "tabulated":
            if m < len(self.table):
                return math.log(float(self.table[m]))
            if self.tail == "repeat-last":
                return math.log(float(self.table[-1]))
            length = len(self.table)
            return math.log(self._tail_coeff) + self._tail_exp * math.log((m + 1) / length)
        raise NumericRangeError(
            "custom feedback has no overflow-safe log form; rescale the feedback function")

    def exact(self, m):
        """Exact rational value of ``f(m)``, or ``None`` when not representable.

        Exactness holds for integer power exponents, int/Fraction constants
        and tables, and custom callables returning int/Fraction.
        """
        m = int(m)
        if self.kind == "power":
            p = self.exponent
            if p == int(p):
                p = int(p)
                base = Fraction(m + 1)
                value = base ** p if p >= 0 else Fraction(1) / base ** (-p)
                return value
            return None
        if self.kind == "constant":
            if isinstance(self.const, (int, Fraction)):
                return Fraction(self.const)
            return None
        if self.kind == "tabulated":
            if m < len(self.table):
                v = self.table[m]
            elif self.tail == "repeat-last":
                v = self.table[-1]
            else:
                return None
            return Fraction(v) if isinstance(v, (int, Fraction)) else None
        value = self.fn(m)
        return Fraction(value) if isinstance(value, (int, Fraction)) else None

    def spec_string(self):
        """Round-trippable textual form (see :func:`parse_feedback`)."""
        if self.kind == "power":
            return f"power:{self.exponent:g}"
        if self.kind == "constant":
            return f"const:{float(self.const):g}"
        if self.kind == "tabulated":
            vals = ",".join(f"{float(v):g}" for v in self.table)
            tail = "repeat" if self.tail == "repeat-last" else "extrapolate"
            return f"table:{vals};tail={tail}"
        return "custom"

    def __repr__(self):
        return f"FeedbackFunction({self.spec_string()})"

    # the lock and cache stay process-local; custom callables must themselves
    # be picklable for worker pools
    def __getstate__(self):
        return {"kind": self.kind, "exponent": self.exponent, "const": self.const,
                "table": self.table, "tail": self.tail, "fn": self.fn,
                "memo_cap": self.memo_cap}

    def __setstate__(self, state):
        self.__init__(state["kind"], exponent=state["exponent"], const=state["const"],
                      table=state["table"], tail=state["tail"], fn=state["fn"],
                      memo_cap=state["memo_cap"])


def parse_feedback(text, memo_cap=DEFAULT_MEMO_CAP):
    """Parse a feedback specification string.

    Grammar::

        power:<p>                              e.g.  power:0.4
        const:<c>                              e.g.  const:2
        table:<v1>,<v2>,...[;tail=<rule>]      e.g.  table:2,3;tail=repeat

    ``<rule>`` is ``repeat`` (the default, alias ``repeat-last``) or
    ``extrapolate`` (alias ``power-extrapolate``).
    """
    text = text.strip()
    head, sep, rest = text.partition(":")
    head = head.lower()
    if not sep:
        raise ValueError(f"feedback spec {text!r} needs a ':' (e.g. 'power:0.5')")
    try:
        if head == "power":
            return FeedbackFunction.power(float(rest), memo_cap=memo_cap)
        if head in ("const", "constant"):
            return FeedbackFunction.constant(float(rest), memo_cap=memo_cap)
        if head == "table":
            values_part, _, tail_part = rest.partition(";")
            values = [float(v) for v in values_part.split(",") if v.strip()]
            tail = "repeat-last"
            if tail_part:
                key, _, rule = tail_part.partition("=")
                if key.strip() != "tail":
                    raise ValueError(f"unknown table option {key.strip()!r}")
                rule = rule.strip().lower()
                aliases = {"repeat": "repeat-last", "repeat-last": "repeat-last",
                           "extrapolate": "power-extrapolate",
                           "power-extrapolate": "power-extrapolate"}
                if rule not in aliases:
                    raise ValueError(f"unknown tail rule {rule!r}")
                tail = aliases[rule]
            return FeedbackFunction.tabulated(values, tail=tail, memo_cap=memo_cap)
    except ValueError as exc:
        raise ValueError(f"bad feedback spec {text!r}: {exc}") from None
    raise ValueError(f"unknown feedback kind {head!r} (expected power, const, or table)")


# ---------------------------------------------------------------------------
# Waiting-time models

_MODEL_FAMILIES = ("exponential", "deterministic-uniform", "gamma", "empirical")


@dataclass(frozen=True)
class WaitingTimeModel:
    """Per-level waiting-time distribution, identical across agents.

    Families:

    * ``exponential``          -- level ``j`` is Exp(rate ``f(j-1)``).
    * ``deterministic-uniform`` -- ``base + jitter * U`` with ``U ~ U[0,1)``,
      the same at every level.  ``jitter = 0`` gives deterministic waits.
    * ``gamma``                -- Gamma(``shape``, rate ``f(j-1)``).
    * ``empirical``            -- uniform resampling from a finite list of
      nonnegative values, the same at every level.

    Every family draws values in ``[0, inf)`` that are almost surely finite.
    An atom at 0 (e.g. ``base = jitter = 0``, or an empirical list containing
    0) is representable; runs of such models can explode, which the race
    engine guards with its event cap rather than this module.
    """

    family: str
    feedback: FeedbackFunction | None = None
    base: float = 0.0
    jitter: float = 0.0
    shape: float = 1.0
    values: tuple = ()

    def __post_init__(self):
        if self.family not in _MODEL_FAMILIES:
            raise UnsupportedFamilyError(f"unknown waiting-time family {self.family!r}")
        if self.family in ("exponential", "gamma"):
            if self.feedback is None:
                raise ValueError(f"{self.family} model needs a feedback function for its rates")
        if self.family == "deterministic-uniform":
            if not (self.base >= 0.0 and math.isfinite(self.base)):
                raise ValueError("base must be finite and >= 0")
            if not (self.jitter >= 0.0 and math.isfinite(self.jitter)):
                raise ValueError("jitter must be finite and >= 0")
        if self.family == "gamma":
            if not (self.shape > 0.0 and math.isfinite(self.shape)):
                raise ValueError("gamma shape must be positive and finite")
        if self.family == "empirical":
            if not self.values:
                raise ValueError("empirical model needs at least one value")
            if any(not (v >= 0.0 and math.isfinite(v)) for v in self.values):
                raise ValueError("empirical values must be finite and >= 0")

    # -- constructors -------------------------------------------------------

    @classmethod
    def exponential(cls, feedback):
        return cls("exponential", feedback=feedback)

    @classmethod
    def deterministic_uniform(cls, base, jitter=0.0):
        return cls("deterministic-uniform", base=float(base), jitter=float(jitter))

    @classmethod
    def gamma(cls, shape, feedback):
        return cls("gamma", feedback=feedback, shape=float(shape))

    @classmethod
    def empirical(cls, values):
        return cls("empirical", values=tuple(float(v) for v in values))

    # -- parameters ---------------------------------------------------------

    def rate(self, level):
        """Exponential/gamma rate at ``level``: the feedback weight at ``level - 1``."""
        if self.family not in ("exponential", "gamma"):
            raise UnsupportedFamilyError(f"{self.family} model has no rate parameter")
        return self.feedback(_checked_level(level) - 1)

    def level_dependent(self):
        return self.family in ("exponential", "gamma")

    def mean(self, level):
        """Analytic mean of the level-``level`` wait."""
        if self.family == "exponential":
            return 1.0 / self.rate(level)
        if self.family == "deterministic-uniform":
            _checked_level(level)
            return self.base + self.jitter / 2.0
        if self.family == "gamma":
            return self.shape / self.rate(level)
        _checked_level(level)
        return float(np.mean(self.values))

    def variance(self, level):
        """Analytic variance of the level-``level`` wait."""
        if self.family == "exponential":
            return 1.0 / self.rate(level) ** 2
        if self.family == "deterministic-uniform":
            _checked_level(level)
            return self.jitter ** 2 / 12.0
        if self.family == "gamma":
            return self.shape / self.rate(level) ** 2
        _checked_level(level)
        return float(np.var(self.values))

    def cdf(self, x, level):
        """Distribution function of the level-``level`` wait (for GoF tests)."""
        if self.family == "exponential":
            r = self.rate(level)
            return 0.0 if x < 0 else -math.expm1(-r * x)
        if self.family == "deterministic-uniform":
            _checked_level(level)
            if self.jitter == 0.0:
                return 0.0 if x < self.base else 1.0
            return min(1.0, max(0.0, (x - self.base) / self.jitter))
        if self.family == "gamma":
            from scipy.stats import gamma as gamma_dist
            return float(gamma_dist.cdf(x, a=self.shape, scale=1.0 / self.rate(level)))
        _checked_level(level)
        return float(np.mean(np.asarray(self.values) <= x))

    # -- sampling -----------------------------------------------------------

    def sample(self, level, rng):
        """One draw of the level-``level`` wait.  Deterministic given the rng state."""
        level = _checked_level(level)
        if self.family == "exponential":
            r = _checked_rate(self.feedback(level - 1), level)
            u = rng.random()
            while u == 0.0:
                u = rng.random()
            return -math.log(u) / r
        if self.family == "deterministic-uniform":
            return self.base + self.jitter * rng.random()
        if self.family == "gamma":
            r = _checked_rate(self.feedback(level - 1), level)
            return float(rng.gamma(self.shape, 1.0 / r))
        return self.values[rng.integers(0, len(self.values))]

    def sample_many(self, level, n, rng):
        """Vectorized draws of the level-``level`` wait (same law as :meth:`sample`)."""
        level = _checked_level(level)
        n = int(n)
        if self.family == "exponential":
            r = _checked_rate(self.feedback(level - 1), level)
            u = rng.random(n)
            zero = u == 0.0
            while zero.any():
                u[zero] = rng.random(int(zero.sum()))
                zero = u == 0.0
            return -np.log(u) / r
        if self.family == "deterministic-uniform":
            return self.base + self.jitter * rng.random(n)
        if self.family == "gamma":
            r = _checked_rate(self.feedback(level - 1), level)
            return rng.gamma(self.shape, 1.0 / r, n)
        vals = np.asarray(self.values)
        return vals[rng.integers(0, len(vals), n)]

    def spec_string(self):
        """Round-trippable textual form (see :func:`parse_model`)."""
        if self.family == "exponential":
            return "exponential"
        if self.family == "deterministic-uniform":
            return f"detuniform:base={self.base:g},jitter={self.jitter:g}"
        if self.family == "gamma":
            return f"gamma:shape={self.shape:g}"
        return "empirical:" + ",".join(f"{v:g}" for v in self.values)


def _checked_level(level):
    level = int(level)
    if level < 1:
        raise ValueError(f"levels are indexed from 1, got {level}")
    return level


def _checked_rate(rate, level):
    if math.isinf(rate):
        raise NumericRangeError(f"rate at level {level} overflows float64")
    return rate


def make_exponential_model(feedback):
    """Model whose level-``j`` wait is exponential with rate ``feedback(j - 1)``."""
    return WaitingTimeModel.exponential(feedback)


def sample_increment(model, level, rng):
    """Draw one level-``level`` waiting time from ``model``.

    Nonnegative and finite; replaying the same rng state yields the identical
    value.  ``level`` must be >= 1.
    """
    return model.sample(level, rng)


def parse_model(text, feedback=None):
    """Parse a waiting-time model specification string.

    Grammar::

        exponential                        (alias: exp; needs a feedback function)
        detuniform:base=<b>,jitter=<j>
        gamma:shape=<k>                    (needs a feedback function)
        empirical:<v1>,<v2>,...
    """
    text = text.strip()
    head, _, rest = text.partition(":")
    head = head.lower()
    if head in ("exponential", "exp"):
        if feedback is None:
            raise ValueError("exponential model needs a feedback function")
        return WaitingTimeModel.exponential(feedback)
    if head == "detuniform":
        params = _parse_kv(rest, text)
        base = float(params.pop("base", 0.0))
        jitter = float(params.pop("jitter", 0.0))
        if params:
            raise ValueError(f"unknown detuniform parameters {sorted(params)} in {text!r}")
        return WaitingTimeModel.deterministic_uniform(base, jitter)
    if head == "gamma":
        params = _parse_kv(rest, text)
        shape = float(params.pop("shape", 1.0))
        if params:
            raise ValueError(f"unknown gamma parameters {sorted(params)} in {text!r}")
        if feedback is None:
            raise ValueError("gamma model needs a feedback function")
        return WaitingTimeModel.gamma(shape, feedback)
    if head == "empirical":
        values = [float(v) for v in rest.split(",") if v.strip()]
        return WaitingTimeModel.empirical(values)
    raise ValueError(f"unknown model family {head!r} "
                     "(expected exponential, detuniform, gamma, or empirical)")


def _parse_kv(rest, original):
    params = {}
    for item in rest.split(","):
        item = item.strip()
        if not item:
            continue
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"expected key=value in {original!r}, got {item!r}")
        params[key.strip()] = value.strip()
    return params


# ---------------------------------------------------------------------------
# Symmetrized increments and the dispersion functional D

@dataclass(frozen=True)
class SymmetrizedIncrement:
    """Difference of two independent copies of a level-``level`` wait.

    Symmetric about 0 by construction.
    """

    model: WaitingTimeModel
    level: int

    def sample(self, rng):
        a = self.model.sample(self.level, rng)
        b = self.model.sample(self.level, rng)
        return a - b

    def sample_many(self, n, rng):
        a = self.model.sample_many(self.level, n, rng)
        b = self.model.sample_many(self.level, n, rng)
        return a - b


def symmetrized_sampler(model, level):
    """Sampler for the symmetrized level-``level`` increment of ``model``."""
    return SymmetrizedIncrement(model, _checked_level(level))


def analytic_D(model, level, lam):
    """Dispersion functional of the symmetrized level-``level`` increment.

    For a symmetrized wait ``Z`` this is
    ``E[Z^2 1{|Z| <= lam}] / lam^2 + P(|Z| >= lam)``.

    Closed forms cover the exponential family (two-sided exponential law) and
    the deterministic-uniform family (triangular law); the empirical family is
    enumerated exactly over value pairs; the gamma family falls back to
    adaptive quadrature on the density of the symmetrized difference at
    relative tolerance 1e-8.
    """
    lam = float(lam)
    if not (lam > 0.0 and math.isfinite(lam)):
        raise ValueError("lam must be positive and finite")
    level = _checked_level(level)
    if model.family == "exponential":
        r = _checked_rate(model.feedback(level - 1), level)
        return _two_sided_exp_D(r * lam)
    if model.family == "deterministic-uniform":
        return _triangular_D(model.jitter, lam)
    if model.family == "empirical":
        return _pairwise_D(np.asarray(model.values, dtype=np.float64), lam)
    if model.family == "gamma":
        r = _checked_rate(model.feedback(level - 1), level)
        return _gamma_difference_D(model.shape, r, lam)
    raise UnsupportedFamilyError(
        f"no dispersion form registered for family {model.family!r}")


def _two_sided_exp_D(u):
    """D for the difference of two i.i.d. exponentials, in the unit ``u = rate * lam``."""
    if u < 1e-3:
        # series around 0 avoids the 2/u cancellation
        return 1.0 - 2.0 * u / 3.0 + u * u / 4.0 - u ** 3 / 15.0
    emu = math.exp(-u)
    return 2.0 * (-math.expm1(-u)) / (u * u) - 2.0 * emu / u


def _two_sided_exp_D_vec(u):
    u = np.asarray(u, dtype=np.float64)
    out = np.empty_like(u)
    small = u < 1e-3
    us = u[small]
    out[small] = 1.0 - 2.0 * us / 3.0 + us * us / 4.0 - us ** 3 / 15.0
    ub = u[~small]
    out[~small] = 2.0 * (-np.expm1(-ub)) / (ub * ub) - 2.0 * np.exp(-ub) / ub
    return out


def _triangular_D(jitter, lam):
    """D for ``jitter * (U - U')``, triangular on ``[-jitter, jitter]``."""
    j = float(jitter)
    if j == 0.0:
        return 0.0
    if lam >= j:
        # support fits inside the window: tail vanishes, so D = E[Z^2] / lam^2
        return (j * j / 6.0) / (lam * lam)
    second = 2.0 * (j * lam ** 3 / 3.0 - lam ** 4 / 4.0) / (j * j)
    tail = (1.0 - lam / j) ** 2
    return second / (lam * lam) + tail


def _pairwise_D(values, lam):
    """Exact D for the difference of two uniform draws from ``values``.

    O(n log n) via sorted prefix sums over the pair differences.
    """
    v = np.sort(values)
    n = len(v)
    pref = np.concatenate(([0.0], np.cumsum(v)))
    pref2 = np.concatenate(([0.0], np.cumsum(v * v)))
    lo = np.searchsorted(v, v - lam, side="left")
    hi = np.searchsorted(v, v + lam, side="right")
    inside = hi - lo
    # sum over j in window of (v_i - v_j)^2
    sq = (v * v * inside
          - 2.0 * v * (pref[hi] - pref[lo])
          + (pref2[hi] - pref2[lo]))
    second = float(np.sum(sq)) / (n * n)
    # |d| >= lam, counting boundary pairs on both sides of the overlap
    lo_ge = np.searchsorted(v, v - lam, side="right")
    hi_ge = np.searchsorted(v, v + lam, side="left")
    tail_pairs = float(np.sum(lo_ge) + np.sum(n - hi_ge))
    tail = tail_pairs / (n * n)
    return second / (lam * lam) + tail


def gamma_difference_pdf(z, shape, rate):
    """Density of the difference of two i.i.d. Gamma(shape, rate) variables."""
    z = np.abs(np.asarray(z, dtype=np.float64))
    nu = shape - 0.5
    coeff = rate ** (shape + 0.5) / (special.gamma(shape) * math.sqrt(math.pi))
    with np.errstate(invalid="ignore"):
        out = coeff * (z / 2.0) ** nu * special.kv(nu, rate * z)
    # kv(nu, 0) is infinite; the density limit at 0 is finite only for shape > 1/2
    if np.ndim(out) == 0:
        return float(out)
    return out


def _gamma_difference_D(shape, rate, lam, epsrel=1e-8):
    pdf = lambda z: gamma_difference_pdf(z, shape, rate)
    second, _ = integrate.quad(lambda z: z * z * pdf(z), 0.0, lam,
                               epsabs=0.0, epsrel=epsrel, limit=200)
    inner, _ = integrate.quad(pdf, 0.0, lam, epsabs=0.0, epsrel=epsrel, limit=200)
    tail = max(0.0, 1.0 - 2.0 * inner)
    return 2.0 * second / (lam * lam) + tail
