"""Drift fields: baseline, score, tuned, Follmer, and regression estimates.

Every field is a callable ``field(t, x)`` accepting points of shape (n, d)
(or (d,) / scalar in one dimension) and returning the drift with the same
shape.  Oracle-backed fields carry their schedule and target so integrators
can complete trajectories exactly at the terminal time.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.integrate import trapezoid
from scipy.linalg import solve_triangular

from .errors import (
    BoundUnavailableError,
    DomainError,
    FittingError,
    InvalidDiffusionError,
    TargetError,
)
from .rng import derive_stream_seed, stream_generator
from .schedules import FollmerScheduleData, Schedule, g_follmer_squared
from .targets import GaussianMixtureTarget, _as_points

# Below this time the conditional-expectation form of the baseline drift is
# used (regular at 0); at or above it the score form (regular at 1).
FORM_SWITCH_TIME = 0.01

# Clamp for tuning-coefficient evaluation exactly at the endpoints.
_T_EDGE = 1e-9


def _tuning_coefficients(s: Schedule, g2: float, t: float):
    """c1 = (g^2 - sigma^2) beta A / 2 and c2 = (g^2 - sigma^2) beta_dot A / 2.

    The tuned drift is (1 + c1) b - c2 x.  Values at t in {0, 1} are taken as
    continuous extensions by clamping t away from the endpoints.
    """
    t = min(max(t, _T_EDGE), 1.0 - _T_EDGE)
    t = min(t, s.t_derivative_max)
    beta = s.beta(t)
    sig = s.sigma(t)
    bd = s.beta_dot(t)
    sd = s.sigma_dot(t)
    denom = 2.0 * t * sig * (bd * sig - beta * sd)
    diff = g2 - sig * sig
    return diff * beta / denom, diff * bd / denom


class BaselineDrift:
    """b_t(x) = E[beta_dot x_star + sigma_dot sqrt(t) z | x_t = x].

    Below ``FORM_SWITCH_TIME`` the conditional-expectation form is used; at
    later times the equivalent score form, which stays regular as sigma -> 0.
    """

    kind = "baseline"

    def __init__(self, schedule: Schedule, target):
        self.schedule = schedule
        self.target = target

    def describe(self) -> dict:
        return {"kind": self.kind, "schedule": self.schedule.name,
                "target": self.target.describe()}

    def __call__(self, t: float, x) -> np.ndarray:
        s = self.schedule
        if not 0.0 <= t <= 1.0:
            raise DomainError(f"t = {t!r} outside [0, 1]")
        if t > s.t_derivative_max:
            raise DomainError(
                f"sigma_dot undefined beyond t = {s.t_derivative_max} for "
                f"schedule {s.name!r}"
            )
        pts, single = _as_points(x, self.target.dim)
        bd = s.beta_dot(t)
        sd = s.sigma_dot(t)
        sig = s.sigma(t)
        if t < FORM_SWITCH_TIME:
            if t == 0.0:
                pm = np.broadcast_to(self.target.mean(), pts.shape)
                pzm = pts / sig
            else:
                pm = self.target.posterior_mean_given(s.beta(t), math.sqrt(t) * sig, pts)
                pzm = (pts - s.beta(t) * pm) / sig
            out = bd * pm + sd * pzm
        else:
            beta = s.beta(t)
            coeff = t * sig * (bd * sig - beta * sd) / beta
            out = (bd / beta) * pts
            if coeff != 0.0:
                score = self.target.marginal_score_given(beta, math.sqrt(t) * sig, pts)
                out = out + coeff * score
        return out[0] if single else out


def baseline_drift(s: Schedule, target, t: float, x) -> np.ndarray:
    return BaselineDrift(s, target)(t, x)


def score_field(s: Schedule, target, t: float, x) -> np.ndarray:
    """grad log rho_t(x) = A_t (beta_t b_t(x) - beta_dot_t x) for t in (0, 1)."""
    if not 0.0 < t < 1.0:
        raise DomainError(f"score field requires t in (0, 1), got {t!r}")
    pts, single = _as_points(x, target.dim)
    b = baseline_drift(s, target, t, pts)
    beta, sig = s.beta(t), s.sigma(t)
    bd, sd = s.beta_dot(t), s.sigma_dot(t)
    A = 1.0 / (t * sig * (bd * sig - beta * sd))
    out = A * (beta * b - bd * pts)
    return out[0] if single else out


def check_tuning_boundary(s: Schedule, g: Callable[[float], float]):
    """Numerically verify the boundary conditions a tuned diffusion must meet.

    The quantities (g^2 - sigma^2)/t near 0 and g^2/sigma near 1 must have
    finite limits.  Divergence like 1/t (respectively 1/sigma) is detected by
    comparing two probe points a decade apart: growth beyond a factor 4
    signals a diverging limit.  The origin check is skipped for schedules in
    the declared singular regime.
    """
    if not s.beta_dot_zero_at_origin:
        q = [abs(g(t) ** 2 - s.sigma(t) ** 2) / t for t in (1e-6, 1e-7)]
        if not all(map(math.isfinite, q)) or q[1] > 4.0 * q[0] + 1e-3:
            raise InvalidDiffusionError(
                "limit of (g^2 - sigma^2)/t at t -> 0 diverges "
                f"(probe values {q[0]:.6g}, {q[1]:.6g})",
                which_limit="origin",
            )
    hi = min(1.0 - 1e-7, s.t_derivative_max)
    q = [g(t) ** 2 / s.sigma(t) for t in (min(1.0 - 1e-6, hi), hi)]
    if not all(map(math.isfinite, q)) or abs(q[1]) > 4.0 * abs(q[0]) + 1e-3:
        raise InvalidDiffusionError(
            "limit of g^2/sigma at t -> 1 diverges "
            f"(probe values {q[0]:.6g}, {q[1]:.6g})",
            which_limit="terminal",
        )


class TunedDrift:
    """b^g_t(x) = b_t(x) + (g^2 - sigma^2)/2 A_t (beta_t b_t(x) - beta_dot_t x).

    ``g`` is a scalar function of time.  Unless ``allow_singular`` is set (or
    the schedule itself declares the singular regime at the origin), the
    boundary limits required for a well-posed tuned drift are verified at
    construction; failures name the diverging limit.
    """

    kind = "tuned"

    def __init__(self, schedule: Schedule, target, g: Callable[[float], float],
                 g_name: str = "custom", check_boundary: bool = True,
                 allow_singular: bool = False):
        self.schedule = schedule
        self.target = target
        self.g = g
        self.g_name = g_name
        self._baseline = BaselineDrift(schedule, target)
        if check_boundary and not allow_singular:
            check_tuning_boundary(schedule, g)

    def describe(self) -> dict:
        return {"kind": self.kind, "schedule": self.schedule.name,
                "target": self.target.describe(), "g": self.g_name}

    def __call__(self, t: float, x) -> np.ndarray:
        pts, single = _as_points(x, self.target.dim)
        b = self._baseline(t, pts)
        c1, c2 = _tuning_coefficients(self.schedule, self.g(t) ** 2, t)
        out = (1.0 + c1) * b - c2 * pts
        return out[0] if single else out


def tuned_drift(s: Schedule, target, g: Callable[[float], float],
                t: float, x, **kwargs) -> np.ndarray:
    return TunedDrift(s, target, g, **kwargs)(t, x)


def follmer_tuned_drift(s: Schedule, target) -> TunedDrift:
    """The KL-optimal tuned drift b^{g^F}; boundary conditions hold by
    construction, so no numerical check is run."""
    g = lambda t: math.sqrt(g_follmer_squared(s, t))
    field = TunedDrift(s, target, g, g_name="follmer", check_boundary=False)
    field.kind = "follmer_special"
    return field


class FollmerGenericDrift:
    """Follmer drift for a generic linear reference dY = a Y dt + g dW.

    b^F_t(x) = a_t x + g_t^2 E[(1/eps) x_star - sqrt(h_t/(eps(1-h_t))) z | x_t = x],
    with the conditional expectation taken under the interpolant
    x_t = h_t x_star + sqrt(eps h_t (1-h_t)) z.
    """

    kind = "follmer_generic"

    def __init__(self, a: Callable[[float], float], g: Callable[[float], float],
                 data: FollmerScheduleData, target):
        self.a = a
        self.g = g
        self.data = data
        self.target = target

    def describe(self) -> dict:
        return {"kind": self.kind, "target": self.target.describe(),
                "eps": self.data.eps}

    def __call__(self, t: float, x) -> np.ndarray:
        h = self.data.h(t)
        if not 0.0 < h < 1.0:
            raise DomainError(
                f"h({t!r}) = {h!r} on the boundary; use the drift limits there"
            )
        eps = self.data.eps
        pts, single = _as_points(x, self.target.dim)
        noise = math.sqrt(eps * h * (1.0 - h))
        pm = self.target.posterior_mean_given(h, noise, pts)
        zm = (pts - h * pm) / noise
        g2 = self.g(t) ** 2
        out = self.a(t) * pts + g2 * (pm / eps - math.sqrt(h / (eps * (1.0 - h))) * zm)
        return out[0] if single else out


def follmer_drift_generic(a, g, data: FollmerScheduleData, target,
                          t: float, x) -> np.ndarray:
    return FollmerGenericDrift(a, g, data, target)(t, x)


class SingularRemainderDrift:
    """The optimally tuned drift with its singular restoring part removed.

    For schedules with beta_dot(0) = 0 the tuned drift behaves like
    -p x / t near the origin; adding p x / t back leaves a drift with a
    finite limit that the singular integrator can consume.
    """

    kind = "singular_remainder"

    def __init__(self, tuned: TunedDrift, p: float):
        self.tuned = tuned
        self.p = p
        self.schedule = tuned.schedule
        self.target = tuned.target

    def describe(self) -> dict:
        return {"kind": self.kind, "p": self.p, "inner": self.tuned.describe()}

    def __call__(self, t: float, x) -> np.ndarray:
        pts, single = _as_points(x, self.target.dim)
        out = self.tuned(t, pts) + self.p * pts / t
        return out[0] if single else out


def singular_decomposition(s: Schedule, target):
    """Split the optimal tuned drift of a singular-regime schedule into the
    pair (p, remainder) with drift = -p x / t + remainder(t, x).

    The exponent p is the limit of t times the drift's linear coefficient,
    extracted by Richardson extrapolation from two probe points.
    """
    if not s.beta_dot_zero_at_origin:
        raise DomainError(
            "singular decomposition applies to schedules with beta_dot(0) = 0"
        )
    tuned = follmer_tuned_drift(s, target)

    def t_times_c2(t):
        _, c2 = _tuning_coefficients(s, g_follmer_squared(s, t), t)
        return t * c2

    p = 2.0 * t_times_c2(1e-6) - t_times_c2(2e-6)
    if p <= 0.0:
        raise DomainError(f"extracted restoring exponent p = {p!r} is not positive")
    return p, SingularRemainderDrift(tuned, p)


# ---------------------------------------------------------------------------
# Regression estimation
# ---------------------------------------------------------------------------

MIN_RBF_BANDWIDTH = 1e-2


@dataclass(frozen=True)
class BasisSpec:
    """Feature basis for per-knot least squares.

    kind: 'affine', 'polynomial' (per-coordinate powers up to ``degree``) or
    'radial' (Gaussian bumps at ``centers`` with common ``bandwidth``; the
    bandwidth is clipped below MIN_RBF_BANDWIDTH so the fitted field keeps an
    explicit Lipschitz bound).
    """

    kind: str
    degree: int = 1
    centers: Optional[tuple] = None
    bandwidth: Optional[float] = None

    def resolve(self, dim: int) -> "FeatureBasis":
        if self.kind == "affine":
            return FeatureBasis(self, dim)
        if self.kind == "polynomial":
            if self.degree < 1:
                raise FittingError("polynomial degree must be >= 1")
            return FeatureBasis(self, dim)
        if self.kind == "radial":
            if not self.centers:
                raise FittingError("radial basis requires centers")
            return FeatureBasis(self, dim)
        raise FittingError(f"unknown basis kind {self.kind!r}")

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "degree": self.degree}
        if self.centers is not None:
            d["centers"] = [list(map(float, c)) for c in self.centers]
        if self.bandwidth is not None:
            d["bandwidth"] = float(self.bandwidth)
        return d

    @staticmethod
    def from_dict(d: dict) -> "BasisSpec":
        centers = d.get("centers")
        if centers is not None:
            centers = tuple(tuple(c) for c in centers)
        return BasisSpec(kind=d["kind"], degree=d.get("degree", 1),
                         centers=centers, bandwidth=d.get("bandwidth"))


class FeatureBasis:
    def __init__(self, spec: BasisSpec, dim: int):
        self.spec = spec
        self.dim = dim
        if spec.kind == "affine":
            self.size = 1 + dim
        elif spec.kind == "polynomial":
            self.size = 1 + dim * spec.degree
        else:
            self._centers = np.atleast_2d(np.asarray(spec.centers, dtype=float))
            if self._centers.shape[1] != dim:
                raise FittingError("radial centers have wrong dimension")
            self._bw = max(float(spec.bandwidth or MIN_RBF_BANDWIDTH), MIN_RBF_BANDWIDTH)
            self.size = 1 + self._centers.shape[0]

    def features(self, x: np.ndarray) -> np.ndarray:
        n = x.shape[0]
        if self.spec.kind == "affine":
            return np.hstack([np.ones((n, 1)), x])
        if self.spec.kind == "polynomial":
            cols = [np.ones((n, 1))]
            for k in range(1, self.spec.degree + 1):
                cols.append(x**k)
            return np.hstack(cols)
        d2 = ((x[:, None, :] - self._centers[None]) ** 2).sum(axis=2)
        return np.hstack([np.ones((n, 1)), np.exp(-0.5 * d2 / self._bw**2)])

    def gradient_bounds(self, radius: float) -> np.ndarray:
        """Per-feature bound on |grad phi_j| over the ball |x| <= radius."""
        if self.spec.kind == "affine":
            return np.array([0.0] + [1.0] * self.dim)
        if self.spec.kind == "polynomial":
            out = [0.0]
            for k in range(1, self.spec.degree + 1):
                out.extend([k * radius ** (k - 1)] * self.dim)
            return np.array(out)
        # sup |grad exp(-|x-c|^2 / (2 h^2))| = exp(-1/2) / h, attained at |x-c| = h
        g = math.exp(-0.5) / self._bw
        return np.array([0.0] + [g] * self._centers.shape[0])


class RegressionEstimator:
    """Per-knot least-squares coefficients with piecewise-linear time
    interpolation.  Evaluations outside the knot range clamp to the
    nearest knot."""

    kind = "estimated"

    def __init__(self, basis: FeatureBasis, time_grid: np.ndarray,
                 coefficients: np.ndarray, dim: int, metadata: Optional[dict] = None):
        time_grid = np.asarray(time_grid, dtype=float)
        if time_grid.ndim != 1 or np.any(np.diff(time_grid) <= 0.0):
            raise FittingError("time_grid must be strictly increasing")
        if time_grid[0] <= 0.0 or time_grid[-1] >= 1.0:
            raise FittingError("time_grid must lie strictly inside (0, 1)")
        coefficients = np.asarray(coefficients, dtype=float)
        if coefficients.shape != (time_grid.size, basis.size, dim):
            raise FittingError(
                f"coefficients shape {coefficients.shape} does not match "
                f"(knots, features, dim) = ({time_grid.size}, {basis.size}, {dim})"
            )
        if not np.all(np.isfinite(coefficients)):
            raise FittingError("coefficients contain non-finite values")
        self.basis = basis
        self.time_grid = time_grid
        self.coefficients = coefficients
        self.dim = dim
        self.metadata = metadata or {}

    def describe(self) -> dict:
        return {"kind": self.kind, "basis": self.basis.spec.to_dict(),
                "knots": int(self.time_grid.size),
                "seed": self.metadata.get("seed")}

    def coefficient_at(self, t: float) -> np.ndarray:
        grid = self.time_grid
        if t <= grid[0]:
            return self.coefficients[0]
        if t >= grid[-1]:
            return self.coefficients[-1]
        j = int(np.searchsorted(grid, t) - 1)
        w = (t - grid[j]) / (grid[j + 1] - grid[j])
        return (1.0 - w) * self.coefficients[j] + w * self.coefficients[j + 1]

    def __call__(self, t: float, x) -> np.ndarray:
        pts, single = _as_points(x, self.dim)
        out = self.basis.features(pts) @ self.coefficient_at(t)
        return out[0] if single else out

    def lipschitz_constants(self, radius: float = 10.0) -> np.ndarray:
        """Per-knot Lipschitz bound of the fitted field on |x| <= radius."""
        g = self.basis.gradient_bounds(radius)
        return np.array([
            float(np.sum(np.linalg.norm(c, axis=1) * g)) for c in self.coefficients
        ])

    # -- serialization ------------------------------------------------------

    def to_json(self) -> str:
        doc = {
            "format": "follmer-estimator",
            "version": 1,
            "dim": self.dim,
            "basis": self.basis.spec.to_dict(),
            "time_grid": self.time_grid.tolist(),
            "coefficients": self.coefficients.tolist(),
            "metadata": self.metadata,
        }
        return json.dumps(doc, sort_keys=True, indent=2)

    @staticmethod
    def from_json(text: str) -> "RegressionEstimator":
        doc = json.loads(text)
        if doc.get("format") != "follmer-estimator":
            raise FittingError("not an estimator document")
        if doc.get("version") != 1:
            raise FittingError(f"unsupported estimator version {doc.get('version')!r}")
        spec = BasisSpec.from_dict(doc["basis"])
        dim = int(doc["dim"])
        return RegressionEstimator(
            basis=spec.resolve(dim),
            time_grid=np.asarray(doc["time_grid"], dtype=float),
            coefficients=np.asarray(doc["coefficients"], dtype=float),
            dim=dim,
            metadata=doc.get("metadata", {}),
        )


def chebyshev_knots(count: int, lo: float, hi: float) -> np.ndarray:
    """Chebyshev points mapped to [lo, hi], ascending."""
    j = np.arange(count)
    nodes = np.cos(math.pi * (j + 0.5) / count)
    return np.sort((lo + hi) / 2.0 - (hi - lo) / 2.0 * nodes)


def _solve_ols(phi: np.ndarray, y: np.ndarray):
    """Least squares via QR; falls back to a tiny ridge when rank-deficient."""
    q, r = np.linalg.qr(phi)
    diag = np.abs(np.diag(r))
    ridge_applied = False
    if diag.min() <= 1e-10 * max(diag.max(), 1.0):
        lam = 1e-10
        gram = phi.T @ phi + lam * np.eye(phi.shape[1])
        coef = np.linalg.solve(gram, phi.T @ y)
        ridge_applied = True
    else:
        coef = solve_triangular(r, q.T @ y)
    return coef, ridge_applied


def _fit_on_draws(basis, time_grid, draw_fn, target_dim, seed, sample_count,
                  floor_fn=None, threads: int = 1):
    """Shared OLS machinery: per-knot feature regression on fresh draws.

    Knots run in parallel when threads > 1; each knot's stream is derived
    from (seed, knot_index), so the result never depends on the worker count.
    """
    coefs = np.empty((time_grid.size, basis.size, target_dim))
    losses = np.empty(time_grid.size)
    floors = np.full(time_grid.size, np.nan)
    ridged_flags = np.zeros(time_grid.size, dtype=bool)

    def fit_knot(k):
        t = float(time_grid[k])
        sub_seed = derive_stream_seed(seed, k)
        x_t, y = draw_fn(t, sub_seed, sample_count)
        phi = basis.features(x_t)
        coef, ridged = _solve_ols(phi, y)
        coefs[k] = coef
        ridged_flags[k] = ridged
        resid = phi @ coef - y
        losses[k] = float(np.mean(np.sum(resid**2, axis=1)))
        if floor_fn is not None:
            floors[k] = floor_fn(t, x_t, y)

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(fit_knot, range(time_grid.size)))
    else:
        for k in range(time_grid.size):
            fit_knot(k)
    return coefs, losses, floors, bool(ridged_flags.any())


def fit_regression(s: Schedule, target, spec: BasisSpec, sample_count: int,
                   seed: int, time_grid: Optional[np.ndarray] = None,
                   knot_count: int = 64, threads: int = 1) -> RegressionEstimator:
    """Fit the baseline drift by per-knot ordinary least squares.

    Draws fresh (x_star, z) pairs at every knot, regresses the target
    beta_dot x_star + sigma_dot sqrt(t) z on features of
    x_t = beta_t x_star + sqrt(t) sigma_t z, and stores per-knot losses.  For
    mixture targets the conditional-variance floor is estimated with the
    exact drift on the same draws.
    """
    basis = spec.resolve(target.dim)
    if sample_count < 10 * basis.size:
        raise FittingError(
            f"sample_count = {sample_count} below 10 x basis size = {10 * basis.size}"
        )
    if time_grid is None:
        time_grid = chebyshev_knots(knot_count, 1e-3, 1.0 - 1e-3)
    time_grid = np.asarray(time_grid, dtype=float)

    def draw(t, sub_seed, n):
        x_star = target.sample(n, derive_stream_seed(sub_seed, 0))
        z = stream_generator(sub_seed, 1).standard_normal((n, target.dim))
        x_t = s.beta(t) * x_star + math.sqrt(t) * s.sigma(t) * z
        y = s.beta_dot(t) * x_star + s.sigma_dot(t) * math.sqrt(t) * z
        return x_t, y

    floor_fn = None
    if isinstance(target, GaussianMixtureTarget):
        oracle = BaselineDrift(s, target)

        def floor_fn(t, x_t, y):
            resid = oracle(t, x_t) - y
            return float(np.mean(np.sum(resid**2, axis=1)))

    coefs, losses, floors, ridged = _fit_on_draws(
        basis, time_grid, draw, target.dim, seed, sample_count, floor_fn,
        threads=threads)
    metadata = {
        "seed": int(seed),
        "sample_count": int(sample_count),
        "loss": float(trapezoid(losses, time_grid)),
        "loss_per_knot": losses.tolist(),
        "variance_floor_per_knot": [None if math.isnan(v) else v for v in floors],
        "ridge_applied": bool(ridged),
        "schedule": s.name,
        "objective": "baseline",
    }
    return RegressionEstimator(basis, time_grid, coefs, target.dim, metadata)


def fit_follmer_regression(a, g, data: FollmerScheduleData, target,
                           spec: BasisSpec, sample_count: int, seed: int,
                           time_grid: Optional[np.ndarray] = None,
                           knot_count: int = 64, terminal_cut: float = 1e-3,
                           threads: int = 1) -> RegressionEstimator:
    """Fit the Follmer control term u_t = b^F_t - a_t x by least squares.

    The regression target (g^2/eps) x_star - g^2 sqrt(h/(eps(1-h))) z can
    have unbounded variance as t -> 1, so the knot grid stops at
    1 - terminal_cut; requesting terminal_cut = 0 is rejected.
    """
    if terminal_cut <= 0.0:
        raise FittingError(
            "terminal_cut must be positive: the regression target is "
            "singular at t = 1"
        )
    basis = spec.resolve(target.dim)
    if sample_count < 10 * basis.size:
        raise FittingError(
            f"sample_count = {sample_count} below 10 x basis size = {10 * basis.size}"
        )
    if time_grid is None:
        time_grid = chebyshev_knots(knot_count, 1e-3, 1.0 - terminal_cut)
    time_grid = np.asarray(time_grid, dtype=float)
    if time_grid[-1] > 1.0 - terminal_cut + 1e-15:
        raise FittingError("time_grid exceeds 1 - terminal_cut")
    eps = data.eps

    def draw(t, sub_seed, n):
        h = data.h(t)
        x_star = target.sample(n, derive_stream_seed(sub_seed, 0))
        z = stream_generator(sub_seed, 1).standard_normal((n, target.dim))
        x_t = h * x_star + math.sqrt(eps * h * (1.0 - h)) * z
        g2 = g(t) ** 2
        y = (g2 / eps) * x_star - g2 * math.sqrt(h / (eps * (1.0 - h))) * z
        return x_t, y

    coefs, losses, floors, ridged = _fit_on_draws(
        basis, time_grid, draw, target.dim, seed, sample_count, None,
        threads=threads)
    metadata = {
        "seed": int(seed),
        "sample_count": int(sample_count),
        "loss": float(trapezoid(losses, time_grid)),
        "loss_per_knot": losses.tolist(),
        "ridge_applied": bool(ridged),
        "objective": "follmer_control",
        "terminal_cut": float(terminal_cut),
    }
    return RegressionEstimator(basis, time_grid, coefs, target.dim, metadata)


class EstimatedDrift:
    """Adapter presenting a fitted estimator as a drift field."""

    kind = "estimated"

    def __init__(self, estimator: RegressionEstimator):
        self.estimator = estimator
        self.dim = estimator.dim

    def describe(self) -> dict:
        return self.estimator.describe()

    def __call__(self, t: float, x) -> np.ndarray:
        return self.estimator(t, x)


# ---------------------------------------------------------------------------
# Lipschitz diagnostics
# ---------------------------------------------------------------------------

def lipschitz_bound(s: Schedule, target, t: float, delta: float = 1e-3) -> float:
    """Upper bound on |grad_x b_t| for mixture targets.

    With smoothing (eta > 0) the bound holds for all t in (0, 1]; with
    eta = 0 the bounded-support form is used and is only available for
    t <= 1 - delta.
    """
    if not isinstance(target, GaussianMixtureTarget):
        raise TargetError("Lipschitz bounds require a Gaussian-mixture target")
    R = target.support_radius()
    eta = target.smoothing_eta
    if t > s.t_derivative_max:
        raise DomainError(f"sigma_dot undefined at t = {t!r} for {s.name!r}")
    if eta > 0.0:
        if not 0.0 < t <= 1.0:
            raise DomainError("smoothed bound requires t in (0, 1]")
        beta, sig = s.beta(t), s.sigma(t)
        bd, sd = s.beta_dot(t), s.sigma_dot(t)
        den = sig**2 * t + beta**2 * eta**2
        return (abs((sig * sd * t + beta * bd * eta**2) / den)
                + 4.0 * R**2 * abs(beta * sig * t * (bd * sig - beta * sd) / den**2))
    if not 0.0 < t <= 1.0 - delta:
        raise BoundUnavailableError(
            "bounded-support form requires eta > 0 or t <= 1 - delta"
        )
    beta, sig = s.beta(t), s.sigma(t)
    bd, sd = s.beta_dot(t), s.sigma_dot(t)
    return abs(sd / sig) + 4.0 * R**2 * (beta / (t * sig**2)) * abs(bd - beta * sd / sig)
