"""Interpolation schedules (beta, sigma) and derived scalar coefficients.

A schedule is a pair of C^1 functions on [0, 1] with beta(0) = 0, beta(1) = 1,
sigma(0) > 0, sigma(1) = 0, beta increasing and sigma decreasing.  Every
coefficient consumed elsewhere in the package (the score prefactor A, the
baseline and KL-optimal diffusion coefficients, the linear reference rate a,
the noise-level map) is derived from the schedule and its analytic
derivatives here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.integrate import quad
from scipy.optimize import brentq

from .errors import (
    DegenerateReferenceError,
    DomainError,
    EvaluationError,
    MonotonicityError,
    ScheduleError,
)

# Grid used for validation and for the monotonicity check of the noise map.
_VALIDATION_POINTS = 1001
_DERIVATIVE_RTOL = 1e-6


@dataclass(frozen=True)
class Schedule:
    """Interpolation schedule with analytic derivatives.

    Schedules are supplied with analytic derivatives rather than numerically
    differentiated; ``validate_schedule`` cross-checks them against centered
    finite differences.  ``beta_dot_zero_at_origin`` marks the singular-drift
    regime in which the optimally tuned drift has an infinite restoring term
    at t = 0.  ``t_derivative_max`` restricts where sigma_dot may be
    evaluated (the linear-sqrt schedule's sigma is non-differentiable at 1).
    """

    name: str
    beta: Callable[[float], float]
    beta_dot: Callable[[float], float]
    sigma: Callable[[float], float]
    sigma_dot: Callable[[float], float]
    beta_ddot_at_0: Optional[float] = None
    beta_dot_zero_at_origin: bool = False
    t_derivative_max: float = 1.0

    def __repr__(self):
        return f"Schedule({self.name!r})"


@dataclass(frozen=True)
class ScheduleCoefficients:
    """All schedule-derived scalars at one time t."""

    t: float
    A: float              # 1 / (t sigma (beta_dot sigma - beta sigma_dot))
    g_baseline: float     # sigma_t
    g_follmer: float      # KL-optimal diffusion coefficient
    a_ref: float          # linear reference rate d/dt log((beta^2 + t sigma^2)/beta)
    noise_level: float    # r(t) = sqrt(t) sigma_t / beta_t


@dataclass(frozen=True)
class FollmerScheduleData:
    """Integrating factor r, bridge fraction h and total noise eps.

    r(t) = exp(int_0^t a), h(t) = (1/eps) int_0^t (r_t/r_u)^2 g_u^2 du and
    eps = int_0^1 (r_1/r_u)^2 g_u^2 du characterize the linear reference
    process and its interpolant representation.
    """

    r: Callable[[float], float]
    h: Callable[[float], float]
    eps: float


@dataclass
class ValidationReport:
    """Outcome of ``validate_schedule``: violations (empty when valid) plus
    notes for checks that were skipped rather than failed."""

    violations: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    @property
    def is_valid(self) -> bool:
        return not self.violations

    def __bool__(self):
        return self.is_valid


# ---------------------------------------------------------------------------
# Built-in catalog
# ---------------------------------------------------------------------------

def _linear_linear() -> Schedule:
    return Schedule(
        name="linear-linear",
        beta=lambda t: t,
        beta_dot=lambda t: 1.0,
        sigma=lambda t: 1.0 - t,
        sigma_dot=lambda t: -1.0,
        beta_ddot_at_0=0.0,
    )


def _linear_sqrt() -> Schedule:
    # sigma is not differentiable at t = 1; derivative checks stop short.
    return Schedule(
        name="linear-sqrt",
        beta=lambda t: t,
        beta_dot=lambda t: 1.0,
        sigma=lambda t: math.sqrt(max(1.0 - t, 0.0)),
        sigma_dot=lambda t: -0.5 / math.sqrt(1.0 - t),
        beta_ddot_at_0=0.0,
        t_derivative_max=1.0 - 1e-9,
    )


def _quadratic_linear() -> Schedule:
    return Schedule(
        name="quadratic-linear",
        beta=lambda t: t * t,
        beta_dot=lambda t: 2.0 * t,
        sigma=lambda t: 1.0 - t,
        sigma_dot=lambda t: -1.0,
        beta_ddot_at_0=2.0,
        beta_dot_zero_at_origin=True,
    )


def _trigonometric() -> Schedule:
    return Schedule(
        name="trigonometric",
        beta=lambda t: math.sin(0.5 * math.pi * t) ** 2,
        beta_dot=lambda t: 0.5 * math.pi * math.sin(math.pi * t),
        sigma=lambda t: math.cos(0.5 * math.pi * t),
        sigma_dot=lambda t: -0.5 * math.pi * math.sin(0.5 * math.pi * t),
        beta_ddot_at_0=0.5 * math.pi**2,
        beta_dot_zero_at_origin=True,
    )


def _saturating_linear() -> Schedule:
    # beta saturates early, so the noise level sqrt(t) sigma / beta INCREASES
    # on an interior window.  A valid interpolation schedule, but it violates
    # the monotonicity hypothesis of the reference-process construction;
    # kept in the catalog to exercise the non-monotone diagnostics and the
    # zero branch of the pointwise KL factor.
    k = 20
    return Schedule(
        name="saturating-linear",
        beta=lambda t: 1.0 - (1.0 - t) ** k,
        beta_dot=lambda t: k * (1.0 - t) ** (k - 1),
        sigma=lambda t: 1.0 - t,
        sigma_dot=lambda t: -1.0,
        beta_ddot_at_0=-float(k * (k - 1)),
    )


_CATALOG = {
    "linear-linear": _linear_linear,
    "linear-sqrt": _linear_sqrt,
    "quadratic-linear": _quadratic_linear,
    "trigonometric": _trigonometric,
    "saturating-linear": _saturating_linear,
}

# Catalog entries satisfying the monotone noise-level hypothesis.
MONOTONE_CATALOG = ("linear-linear", "linear-sqrt", "quadratic-linear",
                    "trigonometric")

CATALOG_NAMES = tuple(sorted(_CATALOG))


def get_schedule(name: str) -> Schedule:
    """Look up a built-in schedule by name."""
    try:
        return _CATALOG[name]()
    except KeyError:
        raise ScheduleError(
            f"unknown schedule {name!r}; available: {', '.join(CATALOG_NAMES)}"
        ) from None


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

def _eval_checked(f, t, label):
    v = f(t)
    if not math.isfinite(v):
        raise EvaluationError(f"{label} is not finite at t={t!r}")
    return v


def validate_schedule(s: Schedule) -> ValidationReport:
    """Check the structural conditions of a schedule.

    Returns a report whose ``violations`` list is empty for valid schedules.
    Each violation names the condition and the offending t.  Derivatives are
    cross-checked against centered finite differences on a 1001-point grid.
    """
    report = ValidationReport()
    v = report.violations

    b0 = _eval_checked(s.beta, 0.0, "beta")
    b1 = _eval_checked(s.beta, 1.0, "beta")
    s0 = _eval_checked(s.sigma, 0.0, "sigma")
    s1 = _eval_checked(s.sigma, 1.0, "sigma")
    if abs(b0) > 1e-12:
        v.append(f"beta(0) = {b0!r}, expected 0")
    if abs(b1 - 1.0) > 1e-12:
        v.append(f"beta(1) = {b1!r}, expected 1")
    if abs(s1) > 1e-12:
        v.append(f"sigma(1) = {s1!r}, expected 0")
    if s0 <= 0.0:
        v.append(f"sigma(0) = {s0!r}, expected > 0")

    bd0 = _eval_checked(s.beta_dot, 0.0, "beta_dot")
    if bd0 < 0.0:
        v.append(f"beta_dot(0) = {bd0!r}, expected >= 0")
    elif bd0 == 0.0 and not s.beta_dot_zero_at_origin:
        v.append(
            "beta_dot(0) = 0 but beta_dot_zero_at_origin is not set "
            "(singular regime must be declared)"
        )

    grid = np.linspace(0.0, 1.0, _VALIDATION_POINTS)[1:-1]
    for t in grid:
        t = float(t)
        bd = _eval_checked(s.beta_dot, t, "beta_dot")
        if bd <= 0.0:
            v.append(f"beta_dot({t!r}) = {bd!r}, expected > 0")
            break
    sd_hi = min(1.0, s.t_derivative_max)
    for t in grid:
        t = float(t)
        if t > sd_hi:
            break
        sd = _eval_checked(s.sigma_dot, t, "sigma_dot")
        if sd >= 0.0:
            v.append(f"sigma_dot({t!r}) = {sd!r}, expected < 0")
            break

    # Finite-difference cross-check of the supplied derivatives.  Schedules
    # whose sigma is non-differentiable at 1 are checked away from the
    # boundary layer, where the centered difference itself is meaningful.
    fd_h = 1e-6
    fd_hi = min(1.0 - 2 * fd_h, sd_hi)
    if s.t_derivative_max < 1.0:
        fd_hi = min(fd_hi, s.t_derivative_max - 1e-3)
    check_grid = np.linspace(2 * fd_h, fd_hi, _VALIDATION_POINTS)
    for t in check_grid:
        t = float(t)
        for f, fdot, label in ((s.beta, s.beta_dot, "beta"), (s.sigma, s.sigma_dot, "sigma")):
            fd = (_eval_checked(f, t + fd_h, label) - _eval_checked(f, t - fd_h, label)) / (2 * fd_h)
            an = _eval_checked(fdot, t, label + "_dot")
            scale = max(abs(an), abs(fd), 1e-8)
            # Centered differences carry O(h^2 f''' ) error; allow for it on
            # top of the requested relative tolerance.
            if abs(fd - an) > _DERIVATIVE_RTOL * scale + 1e-8:
                v.append(
                    f"{label}_dot({t!r}) = {an!r} disagrees with finite difference {fd!r}"
                )
                break
        else:
            continue
        break

    if s.beta_ddot_at_0 is None and not s.beta_dot_zero_at_origin:
        report.notes.append(
            "beta_ddot_at_0 not supplied; the t->0 boundary-limit check of the "
            "optimal diffusion coefficient is skipped"
        )
    if s.t_derivative_max < 1.0:
        report.notes.append(
            f"sigma_dot validated only on [0, {s.t_derivative_max}] "
            "(non-differentiable at t=1)"
        )
    return report


# ---------------------------------------------------------------------------
# Derived coefficients
# ---------------------------------------------------------------------------

def g_follmer_squared(s: Schedule, t: float) -> float:
    """|g^F|^2 via the expanded form 2 t sigma (beta_dot sigma / beta - sigma_dot) - sigma^2.

    The expanded form avoids numerical differentiation of a logarithm and the
    catastrophic cancellation it causes near t = 1.
    """
    if t == 0.0:
        bd0 = s.beta_dot(0.0)
        if bd0 > 0.0:
            return s.sigma(0.0) ** 2
        # Singular regime: take the continuous extension numerically.
        t = 1e-9
    if t == 1.0:
        return 0.0
    t = min(t, s.t_derivative_max)
    beta = s.beta(t)
    if beta <= 0.0:
        raise ScheduleError(f"beta({t!r}) = {beta!r} <= 0; cannot form g_follmer")
    sig = s.sigma(t)
    val = 2.0 * t * sig * (s.beta_dot(t) * sig / beta - s.sigma_dot(t)) - sig * sig
    return abs(val)


def reference_rate(s: Schedule, t: float) -> float:
    """a(t) = d/dt log((beta^2 + t sigma^2) / beta), the linear reference drift rate."""
    if t <= 0.0 or t > 1.0:
        raise DomainError("reference rate requires t in (0, 1]")
    # Schedules whose sigma is non-differentiable at 1 are evaluated at the
    # last admissible point; the rate extends continuously.
    t = min(t, s.t_derivative_max)
    beta = s.beta(t)
    sig = s.sigma(t)
    bd = s.beta_dot(t)
    sd = s.sigma_dot(t)
    num = beta * beta + t * sig * sig
    num_dot = 2.0 * beta * bd + sig * sig + 2.0 * t * sig * sd
    return num_dot / num - bd / beta


def coefficients_at(s: Schedule, t: float) -> ScheduleCoefficients:
    """Evaluate every schedule-derived scalar at time t.

    Interior points use the defining formulas; at t in {0, 1} the continuous
    extensions are used (g^F(1) = 0 always; g^F(0) = sigma_0 when
    beta_dot(0) > 0).
    """
    if not 0.0 <= t <= 1.0:
        raise DomainError(f"t = {t!r} outside [0, 1]")

    sig = s.sigma(t)
    if t == 0.0:
        gF = math.sqrt(g_follmer_squared(s, 0.0))
        # a_ref and A diverge at 0 in general; report the limits along t -> 0+.
        return ScheduleCoefficients(
            t=0.0, A=math.inf, g_baseline=sig, g_follmer=gF,
            a_ref=reference_rate(s, 1e-9), noise_level=math.inf,
        )
    if t == 1.0:
        return ScheduleCoefficients(
            t=1.0, A=math.inf, g_baseline=sig, g_follmer=0.0,
            a_ref=reference_rate(s, 1.0), noise_level=0.0,
        )

    beta = s.beta(t)
    if sig <= 0.0:
        raise ScheduleError(f"sigma({t!r}) = {sig!r} <= 0 in the interior")
    bd = s.beta_dot(t)
    sd = s.sigma_dot(t)
    denom = t * sig * (bd * sig - beta * sd)
    if denom == 0.0:
        raise ScheduleError(f"A(t) denominator vanished at t={t!r}")
    A = 1.0 / denom
    gF = math.sqrt(g_follmer_squared(s, t))
    r = math.sqrt(t) * sig / beta
    for label, value in (("A", A), ("g_follmer", gF), ("noise_level", r)):
        if not math.isfinite(value):
            raise EvaluationError(f"{label} is not finite at t={t!r}")
    return ScheduleCoefficients(
        t=t, A=A, g_baseline=sig, g_follmer=gF,
        a_ref=reference_rate(s, t), noise_level=r,
    )


# ---------------------------------------------------------------------------
# Follmer schedule data (integrating factor, bridge fraction, eps)
# ---------------------------------------------------------------------------

_QUAD_ABS_TOL = 1e-10


def follmer_schedule_data(a: Callable[[float], float],
                          g: Callable[[float], float],
                          eps_tolerance: float = 1e-12) -> FollmerScheduleData:
    """Compute r, h and eps for a reference process dY = a Y dt + g dW.

    All integrals use adaptive quadrature with absolute tolerance 1e-10.
    Raises ``DegenerateReferenceError`` when eps <= eps_tolerance (g = 0).
    """
    cache_A: dict = {}
    cache_J: dict = {}

    def A_int(t: float) -> float:
        # int_0^t a(u) du; a may be mildly singular at 0 but must be integrable.
        if t not in cache_A:
            val, _ = quad(a, 0.0, t, epsabs=_QUAD_ABS_TOL, epsrel=1e-12, limit=400)
            cache_A[t] = val
        return cache_A[t]

    def r(t: float) -> float:
        return math.exp(A_int(t))

    def J(t: float) -> float:
        # int_0^t g(u)^2 / r(u)^2 du
        if t not in cache_J:
            val, _ = quad(lambda u: g(u) ** 2 * math.exp(-2.0 * A_int(u)),
                          0.0, t, epsabs=_QUAD_ABS_TOL, epsrel=1e-12, limit=400)
            cache_J[t] = val
        return cache_J[t]

    eps = r(1.0) ** 2 * J(1.0)
    if not math.isfinite(eps):
        raise EvaluationError("eps is not finite; a or g is not integrable")
    if eps <= eps_tolerance:
        raise DegenerateReferenceError(
            f"eps = {eps!r} <= {eps_tolerance!r}: the reference process has no noise"
        )

    def h(t: float) -> float:
        if t <= 0.0:
            return 0.0
        if t >= 1.0:
            return 1.0
        return r(t) ** 2 * J(t) / eps

    return FollmerScheduleData(r=r, h=h, eps=eps)


def follmer_schedule_data_for(s: Schedule,
                              eps_tolerance: float = 1e-12) -> FollmerScheduleData:
    """Follmer data for a schedule's own reference process (a_ref, g^F)."""
    a = lambda u: reference_rate(s, u)
    g = lambda u: math.sqrt(g_follmer_squared(s, u))
    return follmer_schedule_data(a, g, eps_tolerance=eps_tolerance)


# ---------------------------------------------------------------------------
# Noise-level map
# ---------------------------------------------------------------------------

class NoiseLevelMap:
    """The monotone map t -> r(t) = sqrt(t) sigma_t / beta_t and its inverse.

    Requires beta_t / (sqrt(t) sigma_t) to be non-decreasing, i.e. r
    non-increasing; checked on a grid at construction.  The inverse is
    computed by bracketed root finding to |t - t_hat| <= 1e-12.
    """

    _GRID = 2001

    def __init__(self, s: Schedule):
        self.schedule = s
        ts = np.linspace(1e-8, 1.0 - 1e-9, self._GRID)
        rv = np.array([self(t) for t in ts])
        bad = np.nonzero(np.diff(rv) > 1e-12)[0]
        if bad.size:
            i = int(bad[0])
            raise MonotonicityError(
                f"noise level increases on [{ts[i]!r}, {ts[i + 1]!r}] for "
                f"schedule {s.name!r}",
                interval=(float(ts[i]), float(ts[i + 1])),
            )
        self._ts = ts
        self._rv = rv

    def __call__(self, t: float) -> float:
        if t == 1.0:
            return 0.0
        if not 0.0 < t <= 1.0:
            raise DomainError(f"t = {t!r} outside (0, 1]")
        return math.sqrt(t) * self.schedule.sigma(t) / self.schedule.beta(t)

    def inverse(self, r: float) -> float:
        """Return t in (0, 1) with r(t) = r."""
        if r <= 0.0:
            return 1.0
        lo, hi = 1e-12, 1.0 - 1e-12
        f = lambda t: self(t) - r
        flo, fhi = f(lo), f(hi)
        if flo < 0.0 or fhi > 0.0:
            raise DomainError(f"noise level {r!r} outside the map's range")
        return brentq(f, lo, hi, xtol=1e-12, rtol=8.9e-16)


def noise_level_map(s: Schedule) -> NoiseLevelMap:
    return NoiseLevelMap(s)


# ---------------------------------------------------------------------------
# Named scalar functions of time (diffusion coefficients, reference rates)
# ---------------------------------------------------------------------------

class NamedTimeFunction:
    """A scalar function of t carrying a name for provenance records."""

    def __init__(self, fn: Callable[[float], float], name: str):
        self._fn = fn
        self.name = name

    def __call__(self, t: float) -> float:
        return self._fn(t)

    def __repr__(self):
        return f"NamedTimeFunction({self.name!r})"


def g_baseline_fn(s: Schedule) -> NamedTimeFunction:
    return NamedTimeFunction(lambda t: s.sigma(t), "baseline")


def g_follmer_fn(s: Schedule) -> NamedTimeFunction:
    return NamedTimeFunction(lambda t: math.sqrt(g_follmer_squared(s, t)), "follmer")


def g_constant_fn(value: float) -> NamedTimeFunction:
    return NamedTimeFunction(lambda t: value, f"constant({value})")


def g_table_fn(times, values) -> NamedTimeFunction:
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    if times.ndim != 1 or times.shape != values.shape or np.any(np.diff(times) <= 0):
        raise ScheduleError("g table needs strictly increasing times matching values")
    return NamedTimeFunction(lambda t: float(np.interp(t, times, values)), "table")


def reference_rate_fn(s: Schedule) -> NamedTimeFunction:
    return NamedTimeFunction(lambda t: reference_rate(s, t), f"a_ref({s.name})")
