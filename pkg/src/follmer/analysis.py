"""Path-space KL analysis, schedule-invariance checks and sample distances.

The path-space KL divergence between the exact and estimated diffusions with
common diffusion coefficient g is

    KL = 1/2 int_0^{1-delta} g_t^{-2} |1 + (1/2) beta_t A_t (g_t^2 - sigma_t^2)|^2 L_t dt

with L_t the mean squared drift error over the interpolant marginal.  Its
pointwise minimizer over g, the resulting schedule-invariant total KL* and
the variance identity of the reference process are all computed here, along
with an energy-distance two-sample test for terminal laws.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.integrate import quad, trapezoid

from .drifts import _tuning_coefficients
from .errors import DomainError, TruncationError
from .rng import derive_stream_seed, stream_generator
from .schedules import Schedule, g_follmer_squared, noise_level_map

_KL_QUAD_TOL = 1e-9


# ---------------------------------------------------------------------------
# Drift-error second moments
# ---------------------------------------------------------------------------

def interpolant_draws(s: Schedule, target, t: float, count: int, seed: int):
    """Draws of x_t = beta_t x_star + sqrt(t) sigma_t z from split streams."""
    x_star = target.sample(count, derive_stream_seed(seed, 0))
    z = stream_generator(seed, 1).standard_normal((count, target.dim))
    return s.beta(t) * x_star + math.sqrt(t) * s.sigma(t) * z


@dataclass
class DriftErrorMoments:
    t_grid: np.ndarray
    values: np.ndarray          # L_t per knot
    standard_errors: np.ndarray

    def as_callable(self) -> Callable[[float], float]:
        return lambda t: float(np.interp(t, self.t_grid, self.values))


def drift_error_moments(s: Schedule, target, exact, approx,
                        t_grid, mc_samples: int, seed: int) -> DriftErrorMoments:
    """L_t = E |approx(t, x_t) - exact(t, x_t)|^2 by Monte Carlo per knot."""
    t_grid = np.asarray(t_grid, dtype=float)
    values = np.empty(t_grid.size)
    ses = np.empty(t_grid.size)
    for k, t in enumerate(t_grid):
        x = interpolant_draws(s, target, float(t), mc_samples,
                              derive_stream_seed(seed, k))
        diff = np.asarray(approx(float(t), x)) - np.asarray(exact(float(t), x))
        sq = np.sum(diff**2, axis=1)
        values[k] = float(sq.mean())
        ses[k] = float(sq.std(ddof=1) / math.sqrt(mc_samples))
    return DriftErrorMoments(t_grid=t_grid, values=values, standard_errors=ses)


# ---------------------------------------------------------------------------
# Path-space KL
# ---------------------------------------------------------------------------

@dataclass
class KlReport:
    t_grid: np.ndarray
    integrand: np.ndarray
    L_values: np.ndarray
    total: float
    g_name: str
    truncation: float

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("t,integrand,L\n")
            for t, v, l in zip(self.t_grid, self.integrand, self.L_values):
                fh.write(f"{float(t)!r},{float(v)!r},{float(l)!r}\n")


def _as_loss_callable(L) -> Callable[[float], float]:
    if callable(L):
        return L
    if isinstance(L, (int, float)):
        return lambda t: float(L)
    if isinstance(L, DriftErrorMoments):
        return L.as_callable()
    if isinstance(L, tuple) and len(L) == 2:
        grid, vals = (np.asarray(a, dtype=float) for a in L)
        return lambda t: float(np.interp(t, grid, vals))
    arr = np.asarray(L, dtype=float)
    if arr.ndim == 1:
        grid = np.linspace(0.0, 1.0, arr.size)
        return lambda t: float(np.interp(t, grid, arr))
    raise DomainError("cannot interpret L as a loss profile")


def kl_path(s: Schedule, g: Callable[[float], float], L,
            truncation: float = 1e-3) -> KlReport:
    """Path-space KL with diffusion coefficient g and drift-error profile L.

    Integrates over [0, 1 - truncation] by adaptive quadrature with absolute
    tolerance 1e-9 relative to the integrand scale.  Requires g > 0 on the
    window.
    """
    if truncation <= 0.0 or truncation >= 1.0:
        raise DomainError("truncation must lie in (0, 1)")
    hi = 1.0 - truncation
    loss = _as_loss_callable(L)
    probe = np.linspace(0.0, hi, 513)
    g_vals = np.array([g(float(t)) for t in probe])
    if np.any(g_vals <= 0.0):
        bad = float(probe[int(np.argmin(g_vals))])
        raise DomainError(f"g must be positive on [0, 1 - truncation]; g({bad!r}) <= 0")

    def integrand(t: float) -> float:
        gv = g(t)
        c1, _ = _tuning_coefficients(s, gv * gv, t)
        return 0.5 * (1.0 + c1) ** 2 / (gv * gv) * loss(t)

    vals = np.array([integrand(float(t)) for t in probe])
    scale = max(float(np.max(np.abs(vals))), 1.0)
    total, _ = quad(integrand, 0.0, hi, epsabs=_KL_QUAD_TOL * scale,
                    epsrel=_KL_QUAD_TOL, limit=500)
    return KlReport(
        t_grid=probe, integrand=vals,
        L_values=np.array([loss(float(t)) for t in probe]),
        total=float(total),
        g_name=getattr(g, "name", "custom"),
        truncation=truncation,
    )


@dataclass(frozen=True)
class OptimalG:
    t: float
    g: float
    g_squared: float
    psi_min: float
    alpha: float
    gamma: float


def psi(alpha: float, gamma: float, g_squared: float) -> float:
    """The pointwise KL factor psi(g^2) = g^{-2} |gamma + alpha g^2|^2."""
    return (gamma + alpha * g_squared) ** 2 / g_squared


def optimal_g(s: Schedule, t: float) -> OptimalG:
    """Pointwise minimizer of psi: g^2 = |gamma|/alpha with minimum value
    4 alpha gamma for gamma > 0 and 0 otherwise."""
    if not 0.0 < t < 1.0:
        raise DomainError("optimal_g requires t in (0, 1)")
    beta, sig = s.beta(t), s.sigma(t)
    bd, sd = s.beta_dot(t), s.sigma_dot(t)
    A = 1.0 / (t * sig * (bd * sig - beta * sd))
    alpha = 0.5 * beta * A
    gamma = 1.0 - alpha * sig * sig
    g2 = abs(gamma) / alpha
    value = 4.0 * alpha * gamma if gamma > 0.0 else 0.0
    return OptimalG(t=t, g=math.sqrt(g2), g_squared=g2, psi_min=value,
                    alpha=alpha, gamma=gamma)


# ---------------------------------------------------------------------------
# Score-error models and the schedule-invariant KL*
# ---------------------------------------------------------------------------

class SyntheticScoreError:
    """Estimated score s_hat_r = grad log q_r + perturbation(r, y).

    ``envelope`` bounds E|perturbation|^2 for the tail estimate beyond r_max.
    """

    mode = "synthetic"

    def __init__(self, perturbation: Callable[[float, np.ndarray], np.ndarray],
                 envelope: Optional[Callable[[float], float]] = None,
                 name: str = "synthetic"):
        self.perturbation = perturbation
        self.envelope = envelope
        self.name = name

    def error_squared(self, target, r: float, y: np.ndarray) -> np.ndarray:
        pert = np.asarray(self.perturbation(r, y))
        pert = np.broadcast_to(pert, y.shape)
        return np.sum(pert**2, axis=1)


def exp_decay_error(amplitude: float, dim: int = 1,
                    direction=None) -> SyntheticScoreError:
    """The canonical model s_hat_r = grad log q_r + amplitude e^{-r} u, |u| = 1."""
    if direction is None:
        u = np.zeros(dim)
        u[0] = 1.0
    else:
        u = np.asarray(direction, dtype=float)
        u = u / np.linalg.norm(u)
    return SyntheticScoreError(
        perturbation=lambda r, y: amplitude * math.exp(-r) * u,
        envelope=lambda r: amplitude**2 * math.exp(-2.0 * r),
        name=f"exp_decay({amplitude})",
    )


def zero_error() -> SyntheticScoreError:
    return SyntheticScoreError(
        perturbation=lambda r, y: np.zeros(1),
        envelope=lambda r: 0.0,
        name="zero",
    )


class EstimatorScoreError:
    """Score error implied by a fitted drift through the noise-level map.

    The estimator defines s_hat at noise level r via the drift-to-score
    relation at t = map^{-1}(r); the error is measured against the target's
    exact smoothed score.
    """

    mode = "from_estimator"

    def __init__(self, schedule: Schedule, estimator, name: str = "estimator"):
        self.schedule = schedule
        self.estimator = estimator
        self.map = noise_level_map(schedule)
        self.name = name
        self.envelope = None

    def s_hat(self, target, r: float, y: np.ndarray) -> np.ndarray:
        s = self.schedule
        t = self.map.inverse(r)
        beta, sig = s.beta(t), s.sigma(t)
        bd, sd = s.beta_dot(t), s.sigma_dot(t)
        coeff = t * sig * (bd * sig - beta * sd) / beta   # = 1/(A beta)
        bhat = self.estimator(t, beta * y)
        return (bhat - (bd / beta) * (beta * y)) * (beta / coeff)

    def error_squared(self, target, r: float, y: np.ndarray) -> np.ndarray:
        diff = self.s_hat(target, r, y) - target.score_q(r, y)
        return np.sum(diff**2, axis=1)


def _shared_noise_draws(target, mc_samples: int, seed: int):
    x_star = target.sample(mc_samples, derive_stream_seed(seed, 0))
    z = stream_generator(seed, 1).standard_normal((mc_samples, target.dim))
    return x_star, z


def kl_star(target, err, r_max: float = 50.0, mc_samples: int = 4096,
            seed: int = 0, node_count: int = 256,
            tail_fraction: float = 0.01) -> float:
    """KL* = 2 int_0^inf r E|grad log q_r(x_star + r z) - s_hat_r(x_star + r z)|^2 dr.

    The integral is truncated at r_max on 256 log-spaced nodes with a
    per-node Monte Carlo expectation over shared (x_star, z) draws.  A
    declared tail envelope beyond r_max larger than ``tail_fraction`` of the
    partial integral raises ``TruncationError``.
    """
    nodes = np.geomspace(1e-4, r_max, node_count)
    x_star, z = _shared_noise_draws(target, mc_samples, seed)
    vals = np.empty(node_count)
    for i, r in enumerate(nodes):
        y = x_star + r * z
        vals[i] = 2.0 * r * float(np.mean(err.error_squared(target, float(r), y)))
    partial = float(trapezoid(vals, nodes))
    envelope = getattr(err, "envelope", None)
    if envelope is not None:
        tail, _ = quad(lambda r: 2.0 * r * envelope(r), r_max, np.inf, limit=200)
        if tail > tail_fraction * max(partial, 1e-300) and tail > 1e-12:
            raise TruncationError(
                f"declared tail {tail!r} beyond r_max={r_max} exceeds "
                f"{tail_fraction:.0%} of the partial integral {partial!r}"
            )
    return partial


@dataclass
class InvarianceResult:
    totals: dict
    kl_star_value: float
    max_relative_gap: float
    relative_gap_to_kl_star: float


def _t_form_total(s: Schedule, target, err, x_star, z) -> float:
    """The t-parametrized KL* for one schedule with shared noise draws."""
    nlm = noise_level_map(s)   # raises MonotonicityError when violated

    def weight(t: float) -> float:
        # -(1/2) d/dt (t sigma^2 / beta^2) = r (-dr/dt)
        beta, sig = s.beta(t), s.sigma(t)
        bd = s.beta_dot(t)
        sd = s.sigma_dot(min(t, s.t_derivative_max))
        d_r2 = (sig**2 + 2.0 * t * sig * sd) / beta**2 - 2.0 * t * sig**2 * bd / beta**3
        return max(0.0, -0.5 * d_r2)

    def integrand(t: float) -> float:
        if t <= 0.0 or t >= 1.0:
            return 0.0
        w = weight(t)
        if w == 0.0:
            return 0.0
        r = nlm(t)
        y = x_star + r * z
        return 2.0 * w * float(np.mean(err.error_squared(target, r, y)))

    total, _ = quad(integrand, 0.0, 1.0, limit=500, epsabs=1e-12, epsrel=1e-9)
    return float(total)


def schedule_invariance(schedules: Sequence[Schedule], target, err,
                        mc_samples: int = 4096, seed: int = 0,
                        r_max: float = 50.0) -> InvarianceResult:
    """t-parametrized KL* for two or more schedules plus the r-form value.

    Shared (x_star, z) draws are used throughout, so identical schedules with
    the same seed produce exactly equal totals.  Keys in ``totals`` follow
    the schedule order to keep duplicates distinguishable.
    """
    if len(schedules) < 2:
        raise DomainError("invariance needs at least two schedules")
    x_star, z = _shared_noise_draws(target, mc_samples, seed)
    totals = {}
    for i, s in enumerate(schedules):
        key = s.name if s.name not in totals else f"{s.name}#{i}"
        totals[key] = _t_form_total(s, target, err, x_star, z)
    ref = kl_star(target, err, r_max=r_max, mc_samples=mc_samples, seed=seed)
    vals = list(totals.values())
    scale = max(max(map(abs, vals)), 1e-300)
    if max(map(abs, vals)) > 0:
        gap = (max(vals) - min(vals)) / scale
    else:
        gap = 0.0
    gap_star = (max(abs(v - ref) for v in vals) / max(abs(ref), 1e-300)
                if (ref != 0.0 or any(vals)) else 0.0)
    return InvarianceResult(
        totals=totals, kl_star_value=ref,
        max_relative_gap=float(gap),
        relative_gap_to_kl_star=float(gap_star),
    )


def invariance_check(s1: Schedule, s2: Schedule, target, err,
                     mc_samples: int = 4096, seed: int = 0,
                     r_max: float = 50.0) -> InvarianceResult:
    """Two-schedule convenience wrapper around ``schedule_invariance``."""
    return schedule_invariance((s1, s2), target, err,
                               mc_samples=mc_samples, seed=seed, r_max=r_max)


# ---------------------------------------------------------------------------
# Variance identity of the reference process
# ---------------------------------------------------------------------------

def variance_identity_check(s: Schedule, t: float):
    """lhs = beta_{1-t}^2 int_0^t |g^F_{1-u}|^2 / beta_{1-u}^2 du versus
    rhs = (1-t) sigma_{1-t}^2, per dimension."""
    if not 0.0 < t < 1.0:
        raise DomainError("variance identity requires t in (0, 1)")

    def integrand(u: float) -> float:
        return g_follmer_squared(s, 1.0 - u) / s.beta(1.0 - u) ** 2

    val, _ = quad(integrand, 0.0, t, epsabs=1e-13, epsrel=1e-13, limit=400)
    lhs = s.beta(1.0 - t) ** 2 * val
    rhs = (1.0 - t) * s.sigma(1.0 - t) ** 2
    return float(lhs), float(rhs)


# ---------------------------------------------------------------------------
# Energy distance with bootstrap CI and permutation null
# ---------------------------------------------------------------------------

def _mean_cross_distance_1d(x: np.ndarray, y: np.ndarray) -> float:
    """Mean |x_i - y_j| over all pairs in O((n+m) log(n+m))."""
    xs = np.sort(x)
    ys = np.sort(y)
    csx = np.concatenate([[0.0], np.cumsum(xs)])
    # For each y, sum_i |y - x_i| = y*(2k - n) - 2*prefix_k + total, k = #(x <= y)
    k = np.searchsorted(xs, ys, side="right")
    n = xs.size
    total = csx[-1]
    sums = ys * (2 * k - n) - 2 * csx[k] + total
    return float(sums.sum() / (n * ys.size))


def _mean_cross_distance(x: np.ndarray, y: np.ndarray, chunk: int = 512) -> float:
    if x.shape[1] == 1:
        return _mean_cross_distance_1d(x[:, 0], y[:, 0])
    acc = 0.0
    for lo in range(0, x.shape[0], chunk):
        sub = x[lo:lo + chunk]
        acc += float(np.sqrt(((sub[:, None, :] - y[None]) ** 2).sum(axis=2)).sum())
    return acc / (x.shape[0] * y.shape[0])


def energy_statistic(x: np.ndarray, y: np.ndarray) -> float:
    """V-statistic energy distance 2 E|X-Y| - E|X-X'| - E|Y-Y'|."""
    x = np.atleast_2d(x)
    y = np.atleast_2d(y)
    if x.ndim == 2 and x.shape[1] != y.shape[1]:
        raise DomainError("samples have different dimensions")
    return (2.0 * _mean_cross_distance(x, y)
            - _mean_cross_distance(x, x)
            - _mean_cross_distance(y, y))


@dataclass
class EnergyDistanceResult:
    statistic: float
    ci_low: float
    ci_high: float
    null_quantile_99: float
    p_value: float
    bootstrap_count: int
    permutation_count: int

    @property
    def passes_null_test(self) -> bool:
        """True when the two samples are not distinguished at the 1% level."""
        return self.p_value > 0.01


def sample_distance(sample_a, sample_b, seed: int = 0,
                    bootstrap_count: int = 200, permutation_count: int = 200,
                    subsample_cap: int = 2048) -> EnergyDistanceResult:
    """Energy distance between two samples with a 200-draw bootstrap CI and a
    permutation null calibration.

    Multivariate permutation and bootstrap replicates are computed on a
    deterministic subsample of at most ``subsample_cap`` points per side to
    bound the pairwise cost; one-dimensional samples use an exact
    O(n log n) path at full size.
    """
    a = np.atleast_2d(np.asarray(sample_a, dtype=float))
    b = np.atleast_2d(np.asarray(sample_b, dtype=float))
    if a.shape[0] == 1 and a.shape[1] > 1 and b.shape[0] != 1:
        a = a.T
    if b.shape[0] == 1 and b.shape[1] > 1:
        b = b.T
    if min(a.shape[0], b.shape[0]) < 1000:
        raise DomainError("need at least 1e3 samples on each side")

    stat = energy_statistic(a, b)
    rng = stream_generator(seed, 0)
    dim = a.shape[1]
    if dim > 1 and max(a.shape[0], b.shape[0]) > subsample_cap:
        ia = rng.permutation(a.shape[0])[:subsample_cap]
        ib = rng.permutation(b.shape[0])[:subsample_cap]
        a_sub, b_sub = a[ia], b[ib]
    else:
        a_sub, b_sub = a, b

    boots = np.empty(bootstrap_count)
    for i in range(bootstrap_count):
        ra = a_sub[rng.integers(0, a_sub.shape[0], a_sub.shape[0])]
        rb = b_sub[rng.integers(0, b_sub.shape[0], b_sub.shape[0])]
        boots[i] = energy_statistic(ra, rb)
    # Basic (reverse-percentile) interval: corrects the upward resampling
    # bias the V-statistic suffers near the null.
    q_low, q_high = np.quantile(boots, [0.025, 0.975])
    stat_sub0 = energy_statistic(a_sub, b_sub)
    ci_low = stat + (stat_sub0 - q_high)
    ci_high = stat + (stat_sub0 - q_low)

    pool = np.vstack([a_sub, b_sub])
    na = a_sub.shape[0]
    nulls = np.empty(permutation_count)
    for i in range(permutation_count):
        perm = rng.permutation(pool.shape[0])
        nulls[i] = energy_statistic(pool[perm[:na]], pool[perm[na:]])
    p_value = float((1 + np.sum(nulls >= stat_sub0)) / (1 + permutation_count))

    return EnergyDistanceResult(
        statistic=float(stat),
        ci_low=float(ci_low), ci_high=float(ci_high),
        null_quantile_99=float(np.quantile(nulls, 0.99)),
        p_value=p_value,
        bootstrap_count=bootstrap_count,
        permutation_count=permutation_count,
    )
