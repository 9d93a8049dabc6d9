"""Target distributions with exact sampling and posterior oracles.

Two families are provided.  Gaussian mixtures give closed-form answers for
every quantity the drift formulas consume: the smoothed score grad log q_r,
the posterior mean E[x_star | x_t = x] under the observation model
x_t = a x_star + s zeta, and the posterior covariance.  A one-dimensional
quadrature target handles general exponential-tailed densities through
adaptive integration of the tilted-density formula.

All oracle evaluations accept points of shape (n, dim) (a single point may
be passed as shape (dim,) or a scalar in one dimension) and are pure, so
they can be called concurrently.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import quad
from scipy.linalg import cho_factor, cho_solve

from .errors import DomainError, TargetError
from .schedules import Schedule


def _as_points(x, dim: int) -> tuple[np.ndarray, bool]:
    """Promote x to shape (n, dim); return (points, was_single_point)."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        if dim != 1:
            raise DomainError(f"scalar input for a {dim}-dimensional target")
        return arr.reshape(1, 1), True
    if arr.ndim == 1:
        if arr.shape[0] != dim:
            raise DomainError(f"point of length {arr.shape[0]} for dim {dim}")
        return arr.reshape(1, dim), True
    if arr.ndim == 2 and arr.shape[1] == dim:
        return arr, False
    raise DomainError(f"cannot interpret array of shape {arr.shape} as points in R^{dim}")


def _logsumexp(a, axis):
    m = np.max(a, axis=axis, keepdims=True)
    return m.squeeze(axis) + np.log(np.sum(np.exp(a - m), axis=axis))


class GaussianMixtureTarget:
    """Gaussian mixture with optional Gaussian smoothing.

    ``covariances`` are the pre-smoothing component covariances (symmetric
    PSD, zero allowed); the smoothing scale eta is folded in so that every
    oracle uses the effective covariances C_i + eta^2 I, which must be
    positive definite.
    """

    def __init__(self, weights: Sequence[float], means, covariances,
                 smoothing_eta: float = 0.0):
        w = np.asarray(weights, dtype=float)
        if w.ndim != 1 or w.size == 0:
            raise TargetError("weights must be a non-empty vector")
        if np.any(w < 0.0):
            raise TargetError("weights must be non-negative")
        if abs(w.sum() - 1.0) > 1e-12:
            raise TargetError(f"weights sum to {w.sum()!r}, expected 1 within 1e-12")
        means = np.atleast_2d(np.asarray(means, dtype=float))
        if means.shape[0] != w.size:
            raise TargetError("means and weights disagree in component count")
        dim = means.shape[1]
        covs = np.asarray(covariances, dtype=float)
        if covs.shape != (w.size, dim, dim):
            covs = covs.reshape(w.size, dim, dim)
        if smoothing_eta < 0.0:
            raise TargetError("smoothing_eta must be non-negative")
        eff = covs + smoothing_eta**2 * np.eye(dim)
        for i, c in enumerate(eff):
            if not np.allclose(c, c.T, atol=1e-12):
                raise TargetError(f"covariance {i} is not symmetric")
            try:
                np.linalg.cholesky(c)
            except np.linalg.LinAlgError:
                raise TargetError(
                    f"effective covariance {i} (component + eta^2 I) is not "
                    "positive definite"
                ) from None

        self.weights = w
        self.means = means
        self.covariances = covs          # pre-smoothing
        self.smoothing_eta = float(smoothing_eta)
        self.dim = dim
        self._eff = eff
        self._chol_eff = [np.linalg.cholesky(c) for c in eff]
        self._log_w = np.log(np.maximum(w, 1e-300))

    def describe(self) -> dict:
        return {
            "type": "gaussian_mixture",
            "dim": self.dim,
            "components": int(self.weights.size),
            "smoothing_eta": self.smoothing_eta,
        }

    # -- basic moments -----------------------------------------------------

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def covariance(self) -> np.ndarray:
        m = self.mean()
        out = np.zeros((self.dim, self.dim))
        for w, mu, c in zip(self.weights, self.means, self._eff):
            d = mu - m
            out += w * (c + np.outer(d, d))
        return out

    def support_radius(self) -> float:
        """Declared radius of the pre-smoothing component: largest mean norm
        plus three times the largest pre-smoothing standard deviation."""
        mean_bound = float(max(np.linalg.norm(m) for m in self.means))
        std_bound = 0.0
        for c in self.covariances:
            ev = np.linalg.eigvalsh(c)
            std_bound = max(std_bound, math.sqrt(max(float(ev[-1]), 0.0)))
        return mean_bound + 3.0 * std_bound

    # -- sampling ----------------------------------------------------------

    def sample(self, count: int, seed: int) -> np.ndarray:
        """Draw ``count`` points, deterministically for a given seed.

        Component indices by inverse CDF on the weight vector, then a
        Cholesky transform of standard normals.
        """
        if count < 1:
            raise DomainError("count must be >= 1")
        rng = np.random.Generator(np.random.PCG64(seed))
        u = rng.random(count)
        cum = np.cumsum(self.weights)
        idx = np.searchsorted(cum, u, side="right").clip(max=len(cum) - 1)
        z = rng.standard_normal((count, self.dim))
        out = np.empty((count, self.dim))
        for i, chol in enumerate(self._chol_eff):
            sel = idx == i
            if np.any(sel):
                out[sel] = self.means[i] + z[sel] @ chol.T
        return out

    # -- posterior oracles under x_obs = a x_star + s zeta ------------------

    def _posterior_pieces(self, coef: float, noise_var: float):
        """Per-component Cholesky factors, gains and posterior covariances
        for the observation model x_obs = coef * x_star + noise, with
        isotropic noise variance ``noise_var``."""
        eye = np.eye(self.dim)
        pieces = []
        for mu, c in zip(self.means, self._eff):
            S = coef**2 * c + noise_var * eye
            cf = cho_factor(S, lower=True)
            logdet = 2.0 * np.sum(np.log(np.diag(cf[0])))
            gain = coef * cho_solve(cf, c).T          # C S^{-1} scaled by coef
            post_cov = c - coef**2 * c @ cho_solve(cf, c)
            pieces.append((mu, cf, logdet, gain, post_cov))
        return pieces

    def _log_resp(self, pieces, coef, x):
        """Posterior log-responsibilities, shape (n, K); max-subtraction in
        the caller keeps them usable for |x| large."""
        n = x.shape[0]
        logs = np.empty((n, len(pieces)))
        for i, (mu, cf, logdet, _, _) in enumerate(pieces):
            dev = x - coef * mu
            sol = cho_solve(cf, dev.T).T
            maha = np.einsum("ij,ij->i", dev, sol)
            logs[:, i] = self._log_w[i] - 0.5 * (maha + logdet + self.dim * math.log(2 * math.pi))
        return logs

    def posterior_mean_given(self, coef: float, noise_std: float, x) -> np.ndarray:
        """E[x_star | coef x_star + noise_std zeta = x]."""
        pts, single = _as_points(x, self.dim)
        if noise_std == 0.0 and coef != 0.0:
            out = pts / coef
            return out[0] if single else out
        pieces = self._posterior_pieces(coef, noise_std**2)
        logs = self._log_resp(pieces, coef, pts)
        logs -= logs.max(axis=1, keepdims=True)
        resp = np.exp(logs)
        resp /= resp.sum(axis=1, keepdims=True)
        out = np.zeros_like(pts)
        for i, (mu, _, _, gain, _) in enumerate(pieces):
            comp_mean = mu + (pts - coef * mu) @ gain.T
            out += resp[:, [i]] * comp_mean
        return out[0] if single else out

    def posterior_cov_given(self, coef: float, noise_std: float, x) -> np.ndarray:
        """Cov(x_star | coef x_star + noise_std zeta = x), shape (n, d, d)."""
        pts, single = _as_points(x, self.dim)
        pieces = self._posterior_pieces(coef, noise_std**2)
        logs = self._log_resp(pieces, coef, pts)
        logs -= logs.max(axis=1, keepdims=True)
        resp = np.exp(logs)
        resp /= resp.sum(axis=1, keepdims=True)
        n = pts.shape[0]
        mean = np.zeros_like(pts)
        second = np.zeros((n, self.dim, self.dim))
        for i, (mu, _, _, gain, post_cov) in enumerate(pieces):
            comp_mean = mu + (pts - coef * mu) @ gain.T
            mean += resp[:, [i]] * comp_mean
            second += resp[:, i, None, None] * (
                post_cov[None] + np.einsum("ni,nj->nij", comp_mean, comp_mean)
            )
        cov = second - np.einsum("ni,nj->nij", mean, mean)
        return cov[0] if single else cov

    def posterior_components(self, coef: float, noise_std: float, x):
        """Responsibilities, conditional means and covariances per component;
        used for exact conditional-Gaussian sampling of x_star given x_obs."""
        pts, _ = _as_points(x, self.dim)
        pieces = self._posterior_pieces(coef, noise_std**2)
        logs = self._log_resp(pieces, coef, pts)
        logs -= logs.max(axis=1, keepdims=True)
        resp = np.exp(logs)
        resp /= resp.sum(axis=1, keepdims=True)
        means = np.stack([
            mu + (pts - coef * mu) @ gain.T for (mu, _, _, gain, _) in pieces
        ])                                            # (K, n, d)
        covs = np.stack([p[4] for p in pieces])       # (K, d, d)
        return resp, means, covs

    def marginal_score_given(self, coef: float, noise_std: float, x) -> np.ndarray:
        """Score of the law of coef x_star + noise_std zeta at x."""
        pts, single = _as_points(x, self.dim)
        pieces = self._posterior_pieces(coef, noise_std**2)
        logs = self._log_resp(pieces, coef, pts)
        logs -= logs.max(axis=1, keepdims=True)
        resp = np.exp(logs)
        resp /= resp.sum(axis=1, keepdims=True)
        out = np.zeros_like(pts)
        for i, (mu, cf, _, _, _) in enumerate(pieces):
            dev = pts - coef * mu
            out -= resp[:, [i]] * cho_solve(cf, dev.T).T
        return out[0] if single else out

    def score_q(self, r: float, x) -> np.ndarray:
        """Score of q_r = mu_star * N(0, r^2 I), the law of x_star + r z."""
        if r < 0.0:
            raise DomainError("noise level r must be >= 0")
        return self.marginal_score_given(1.0, r, x)

    def log_q(self, r: float, x) -> np.ndarray:
        """log q_r(x) up to the mixture normalization; exact including it."""
        pts, single = _as_points(x, self.dim)
        pieces = self._posterior_pieces(1.0, r**2)
        logs = self._log_resp(pieces, 1.0, pts)
        out = _logsumexp(logs, axis=1)
        return out[0] if single else out


class QuadratureTarget1D:
    """One-dimensional target defined by an unnormalized log-density.

    ``support_radius`` is the radius beyond which the exponential-tail
    envelope with rate ``tail_rate`` must hold; integrals are truncated at
    support_radius + 40 / tail_rate, where the tail contribution is below
    1e-15 relative to the envelope.
    """

    _TABLE_SIZE = 100_000
    dim = 1

    def __init__(self, log_density: Callable[[float], float],
                 support_radius: float, tail_rate: float,
                 name: str = "quadrature"):
        if tail_rate <= 0.0:
            raise TargetError("tail_rate must be positive")
        self.log_density = log_density
        self.support_radius = float(support_radius)
        self.tail_rate = float(tail_rate)
        self.name = name
        self.truncation_radius = self.support_radius + 40.0 / self.tail_rate
        self._check_tail()
        self._table = None

    def describe(self) -> dict:
        return {"type": "quadrature", "name": self.name, "dim": 1}

    def _check_tail(self):
        """Probe that the declared exponential rate makes the truncation at
        support_radius + 40 / tail_rate negligible: the log-density at the
        boundary must sit at least 34 nats (~1e-15) below its interior peak,
        and the envelope log rho + C1 |x| must stay finite on all probes."""
        R = self.truncation_radius
        probes = np.linspace(-R, R, 513)
        vals = np.array([self.log_density(float(x)) for x in probes])
        if not np.all(np.isfinite(vals)):
            raise TargetError("log-density is not finite on the truncation window")
        peak = float(vals.max())
        for x in (-R, R):
            if self.log_density(float(x)) > peak - 34.0:
                raise TargetError(
                    f"log-density at x={float(x)!r} has not decayed enough for "
                    f"the declared tail rate {self.tail_rate}; the exponential "
                    "envelope does not hold"
                )

    # -- sampling ----------------------------------------------------------

    def _cdf_table(self):
        if self._table is None:
            xs = np.linspace(-self.truncation_radius, self.truncation_radius,
                             self._TABLE_SIZE)
            logp = np.array([self.log_density(float(x)) for x in xs])
            p = np.exp(logp - logp.max())
            cdf = np.concatenate([[0.0], np.cumsum((p[1:] + p[:-1]) * 0.5 * np.diff(xs))])
            cdf /= cdf[-1]
            self._table = (xs, cdf)
        return self._table

    def sample(self, count: int, seed: int) -> np.ndarray:
        """Inverse-CDF sampling on a 1e5-point table; deterministic per seed."""
        if count < 1:
            raise DomainError("count must be >= 1")
        xs, cdf = self._cdf_table()
        rng = np.random.Generator(np.random.PCG64(seed))
        u = rng.random(count)
        out = np.interp(u, cdf, xs)
        return out.reshape(count, 1)

    def mean(self) -> np.ndarray:
        num = self._integrate(lambda y: y)
        den = self._integrate(lambda y: 1.0)
        return np.array([num / den])

    def covariance(self) -> np.ndarray:
        m = float(self.mean()[0])
        num = self._integrate(lambda y: (y - m) ** 2)
        den = self._integrate(lambda y: 1.0)
        return np.array([[num / den]])

    def _integrate(self, fn, shift: float = 0.0):
        R = self.truncation_radius
        val, _ = quad(lambda y: fn(y) * math.exp(self.log_density(y) - shift),
                      -R, R, limit=400, points=[0.0])
        return val

    # -- posterior oracles ---------------------------------------------------

    def _tilted_moments(self, coef: float, noise_std: float, x: float):
        """First two moments of the posterior rho(y) exp(-(x - coef y)^2 / (2 s^2))
        by adaptive quadrature, stabilized by a log-space shift."""
        if noise_std <= 0.0:
            raise DomainError("noise_std must be positive for the quadrature target")
        R = self.truncation_radius
        if coef == 0.0:
            lo, hi = -R, R
            center = 0.0
        else:
            center = x / coef
            width = noise_std / abs(coef)
            lo = min(-R, center - 40.0 * width - width**2 * self.tail_rate)
            hi = max(R, center + 40.0 * width)
        probe = np.linspace(lo, hi, 4001)
        logf = np.array([self.log_density(float(y)) for y in probe])
        logf -= (x - coef * probe) ** 2 / (2.0 * noise_std**2)
        shift = float(logf.max())
        if not math.isfinite(shift):
            raise TargetError("tilted density is identically zero or not finite")

        def f(y):
            return math.exp(self.log_density(y)
                            - (x - coef * y) ** 2 / (2.0 * noise_std**2) - shift)

        special = sorted({p for p in (0.0, center) if lo < p < hi})
        kw = dict(limit=400, epsabs=1e-12, epsrel=1e-10, points=special or None)
        den = quad(f, lo, hi, **kw)[0]
        num1 = quad(lambda y: y * f(y), lo, hi, **kw)[0]
        num2 = quad(lambda y: y * y * f(y), lo, hi, **kw)[0]
        if den <= 0.0:
            raise TargetError(f"posterior normalization vanished at x={x!r}")
        return num1 / den, num2 / den - (num1 / den) ** 2

    def posterior_mean_given(self, coef: float, noise_std: float, x) -> np.ndarray:
        pts, single = _as_points(x, 1)
        out = np.array([[self._tilted_moments(coef, noise_std, float(p))[0]]
                        for p in pts[:, 0]])
        return out[0] if single else out

    def posterior_cov_given(self, coef: float, noise_std: float, x) -> np.ndarray:
        pts, single = _as_points(x, 1)
        out = np.array([[[self._tilted_moments(coef, noise_std, float(p))[1]]]
                        for p in pts[:, 0]])
        return out[0] if single else out

    def marginal_score_given(self, coef: float, noise_std: float, x) -> np.ndarray:
        """Score of the law of coef x_star + noise_std zeta via the posterior
        mean: grad log rho(x) = (coef E[x_star | x] - x) / noise_std^2."""
        pts, single = _as_points(x, 1)
        pm = self.posterior_mean_given(coef, noise_std, pts)
        out = (coef * pm - pts) / noise_std**2
        return out[0] if single else out

    def score_q(self, r: float, x) -> np.ndarray:
        if r < 0.0:
            raise DomainError("noise level r must be >= 0")
        if r == 0.0:
            raise TargetError(
                "score at r = 0 is undefined for a quadrature target "
                "(density may be non-smooth)"
            )
        return self.marginal_score_given(1.0, r, x)

    def support_radius_declared(self) -> float:
        return self.support_radius


# ---------------------------------------------------------------------------
# Quadrature-target catalog
# ---------------------------------------------------------------------------

def make_quadrature_target(name: str, **params) -> QuadratureTarget1D:
    """Catalog entries: 'laplace' (scale b) and 'gaussian' (std s)."""
    if name == "laplace":
        b = float(params.get("scale", 1.0))
        if b <= 0.0:
            raise TargetError("laplace scale must be positive")
        return QuadratureTarget1D(
            log_density=lambda y: -abs(y) / b,
            support_radius=0.0,
            tail_rate=1.0 / b,
            name=f"laplace(scale={b})",
        )
    if name == "gaussian":
        s = float(params.get("std", 1.0))
        if s <= 0.0:
            raise TargetError("gaussian std must be positive")
        return QuadratureTarget1D(
            log_density=lambda y: -0.5 * (y / s) ** 2,
            support_radius=0.0,
            tail_rate=1.0 / s,
            name=f"gaussian(std={s})",
        )
    raise TargetError(f"unknown quadrature target {name!r}")


# ---------------------------------------------------------------------------
# Module-level operations (the drift formulas consume these)
# ---------------------------------------------------------------------------

def sample(target, count: int, seed: int) -> np.ndarray:
    return target.sample(count, seed)


def score_q(target, r: float, x) -> np.ndarray:
    """grad log q_r(x) with q_r = mu_star * N(0, r^2 I)."""
    return target.score_q(r, x)


def posterior_mean(target, s: Schedule, t: float, x) -> np.ndarray:
    """E[x_star | beta_t x_star + sqrt(t) sigma_t z = x].

    At t = 1 the observation is x_star itself, so x is returned; at t = 0
    the conditioning event is trivial and the prior mean is returned.
    """
    if not 0.0 <= t <= 1.0:
        raise DomainError(f"t = {t!r} outside [0, 1]")
    pts, single = _as_points(x, target.dim)
    if t == 1.0:
        return pts[0] if single else pts
    if t == 0.0:
        out = np.broadcast_to(target.mean(), pts.shape).copy()
        return out[0] if single else out
    coef = s.beta(t)
    noise = math.sqrt(t) * s.sigma(t)
    out = target.posterior_mean_given(coef, noise, pts)
    return out[0] if single else out


def posterior_z_mean(target, s: Schedule, t: float, x) -> np.ndarray:
    """E[sqrt(t) z | x_t = x] = (x - beta_t E[x_star | x_t = x]) / sigma_t."""
    if not 0.0 <= t < 1.0:
        raise DomainError(f"t = {t!r} outside [0, 1)")
    sig = s.sigma(t)
    if sig <= 0.0:
        raise DomainError(f"sigma({t!r}) = {sig!r}; use drift limits at t = 1")
    pts, single = _as_points(x, target.dim)
    pm = posterior_mean(target, s, t, pts)
    out = (pts - s.beta(t) * pm) / sig
    return out[0] if single else out


def marginal_moments(target, s: Schedule, t: float):
    """Mean and covariance of the time-t interpolant marginal, exactly."""
    mean = s.beta(t) * target.mean()
    cov = s.beta(t) ** 2 * target.covariance() + t * s.sigma(t) ** 2 * np.eye(target.dim)
    return mean, cov
