"""SDE simulation: Euler-Maruyama, the singular-initial-time integrator,
and the exact linear reference process.

All randomness flows from a base seed through per-path streams derived with
the documented splitmix64 mixer, so ensembles are reproducible per
(descriptor, seed) and independent of block size or thread count.  Paths are
merged by path index.
"""

from __future__ import annotations

import json
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import DomainError, SimulationDivergenceError
from .rng import derive_stream_seed
from .schedules import Schedule
from .targets import GaussianMixtureTarget

_MAGIC = b"FPE1"
_GL64 = np.polynomial.legendre.leggauss(64)
_GL16 = np.polynomial.legendre.leggauss(16)
_GL8 = np.polynomial.legendre.leggauss(8)


def derive_path_seed(base_seed: int, path_index) -> "int | np.ndarray":
    """Per-path stream seed: splitmix64 mix of (base_seed, path_index)."""
    return derive_stream_seed(base_seed, path_index)


@dataclass(frozen=True)
class IntegratorConfig:
    """Simulation controls.

    ``terminal_clip`` is the distance delta kept from t_end: integration
    stops at t_end - delta and, when t_end = 1 and the drift is oracle-backed
    by a mixture target, the final state is completed with an exact draw from
    the conditional law of x_star given the clipped state.  Estimated or
    non-oracle drifts take a plain Euler step instead.  ``store_times`` are
    forced onto the grid and always stored; ``store_stride`` thins the rest.
    """

    scheme: str = "euler_maruyama"
    step_count: int = 1000
    t_start: float = 0.0
    t_end: float = 1.0
    terminal_clip: float = 0.0
    seed: int = 0
    store_times: tuple = ()
    store_stride: int = 1
    grid_kind: str = "uniform"

    def __post_init__(self):
        if self.scheme not in ("euler_maruyama", "singular_integrating_factor"):
            raise DomainError(f"unknown scheme {self.scheme!r}")
        if self.step_count < 2:
            raise DomainError("step_count must be >= 2")
        if not 0.0 <= self.t_start < self.t_end <= 1.0:
            raise DomainError("need 0 <= t_start < t_end <= 1")
        if self.terminal_clip < 0.0:
            raise DomainError("terminal_clip must be >= 0")
        if self.t_end - self.terminal_clip <= self.t_start:
            raise DomainError("terminal_clip leaves an empty time window")
        if self.store_stride < 1:
            raise DomainError("store_stride must be >= 1")
        if self.grid_kind not in ("uniform", "cosine"):
            raise DomainError(f"unknown grid_kind {self.grid_kind!r}")


@dataclass
class PathEnsemble:
    """Simulated trajectories on a shared stored time grid."""

    times: np.ndarray                 # (T,)
    paths: np.ndarray                 # (path_count, T, dim)
    seed: int
    drift_descriptor: dict = field(default_factory=dict)
    g_descriptor: dict = field(default_factory=dict)

    @property
    def path_count(self) -> int:
        return self.paths.shape[0]

    @property
    def dim(self) -> int:
        return self.paths.shape[2]

    def marginal(self, t: float, atol: float = 1e-9) -> np.ndarray:
        """States at the stored time closest to t (must match within atol)."""
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[i] - t) > atol:
            raise DomainError(f"time {t!r} not stored (closest: {self.times[i]!r})")
        return self.paths[:, i, :]

    def terminal(self) -> np.ndarray:
        return self.paths[:, -1, :]

    # -- export ------------------------------------------------------------

    def save_binary(self, path):
        header = json.dumps({
            "version": 1,
            "path_count": int(self.path_count),
            "grid_count": int(self.times.size),
            "dim": int(self.dim),
            "seed": int(self.seed),
            "times": self.times.tolist(),
            "drift": self.drift_descriptor,
            "g": self.g_descriptor,
        }, sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<IQ", 1, len(header)))
            fh.write(header)
            fh.write(np.ascontiguousarray(self.paths, dtype="<f8").tobytes())

    @staticmethod
    def load_binary(path) -> "PathEnsemble":
        with open(path, "rb") as fh:
            if fh.read(4) != _MAGIC:
                raise DomainError(f"{path} is not an ensemble file")
            version, hlen = struct.unpack("<IQ", fh.read(12))
            if version != 1:
                raise DomainError(f"unsupported ensemble version {version}")
            header = json.loads(fh.read(hlen).decode())
            shape = (header["path_count"], header["grid_count"], header["dim"])
            body = np.frombuffer(fh.read(), dtype="<f8").reshape(shape)
        return PathEnsemble(
            times=np.asarray(header["times"], dtype=float),
            paths=body.copy(),
            seed=int(header["seed"]),
            drift_descriptor=header.get("drift", {}),
            g_descriptor=header.get("g", {}),
        )

    def to_csv(self, path):
        dim = self.dim
        cols = ",".join(f"x{j}" for j in range(dim))
        with open(path, "w") as fh:
            fh.write(f"path,time,{cols}\n")
            for p in range(self.path_count):
                for i, t in enumerate(self.times):
                    vals = ",".join(repr(float(v)) for v in self.paths[p, i])
                    fh.write(f"{p},{t!r},{vals}\n")


# ---------------------------------------------------------------------------
# Grid construction
# ---------------------------------------------------------------------------

def _build_grid(cfg: IntegratorConfig):
    hi = cfg.t_end - cfg.terminal_clip
    if cfg.grid_kind == "cosine":
        # Step size shrinks like cos(pi u / 2) towards t_end, where the
        # baseline diffusion stiffens as sigma -> 0.
        u = np.linspace(0.0, 1.0, cfg.step_count + 1)
        grid = cfg.t_start + (hi - cfg.t_start) * np.sin(0.5 * math.pi * u)
        grid[0], grid[-1] = cfg.t_start, hi
    else:
        grid = np.linspace(cfg.t_start, hi, cfg.step_count + 1)
    extra = [t for t in cfg.store_times
             if cfg.t_start <= t <= hi and not np.any(np.abs(grid - t) < 1e-12)]
    if extra:
        grid = np.sort(np.concatenate([grid, np.asarray(extra, dtype=float)]))
    store_mask = np.zeros(grid.size, dtype=bool)
    store_mask[::cfg.store_stride] = True
    store_mask[0] = store_mask[-1] = True
    for t in cfg.store_times:
        if cfg.t_start <= t <= hi:
            store_mask[int(np.argmin(np.abs(grid - t)))] = True
    return grid, np.nonzero(store_mask)[0]


def _block_ranges(path_count: int, block: int):
    for lo in range(0, path_count, block):
        yield lo, min(lo + block, path_count)


def _gauss_legendre(fn, lo: float, hi: float, rule) -> float:
    nodes, weights = rule
    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    return half * float(np.sum(weights * np.array([fn(mid + half * u) for u in nodes])))


# ---------------------------------------------------------------------------
# Euler-Maruyama with optional exact terminal completion
# ---------------------------------------------------------------------------

def _terminal_jump_possible(drift, cfg: IntegratorConfig) -> bool:
    return (cfg.terminal_clip > 0.0 and cfg.t_end == 1.0
            and isinstance(getattr(drift, "target", None), GaussianMixtureTarget)
            and getattr(drift, "schedule", None) is not None)


def _jump_to_target(drift, t_last: float, x: np.ndarray, gens) -> np.ndarray:
    """Exact completion X -> X_1: draw x_star from its conditional law given
    the clipped state, using each path's own stream."""
    s: Schedule = drift.schedule
    target: GaussianMixtureTarget = drift.target
    coef = s.beta(t_last)
    noise = math.sqrt(t_last) * s.sigma(t_last)
    resp, means, covs = target.posterior_components(coef, noise, x)
    chols = np.stack([np.linalg.cholesky(c) for c in covs])
    cum = np.cumsum(resp, axis=1)
    out = np.empty_like(x)
    dim = x.shape[1]
    for i, gen in enumerate(gens):
        u = gen.random()
        k = int(np.searchsorted(cum[i], u, side="right").clip(max=cum.shape[1] - 1))
        out[i] = means[k, i] + chols[k] @ gen.standard_normal(dim)
    return out


def simulate(drift, g: Callable[[float], float], cfg: IntegratorConfig,
             path_count: int, dim: Optional[int] = None,
             threads: int = 1) -> PathEnsemble:
    """Euler-Maruyama simulation of dX = drift dt + g dW from X_0 = 0.

    Increments are g(t_k) sqrt(dt) xi with xi drawn from the per-path stream
    (seed, path_index); results are deterministic and independent of the
    block partition or thread count.
    """
    if dim is None:
        dim = getattr(drift, "dim", None) or getattr(
            getattr(drift, "target", None), "dim", None) or 1
    grid, store_idx = _build_grid(cfg)
    dts = np.diff(grid)
    g_vals = np.array([g(float(t)) for t in grid[:-1]])
    jump = _terminal_jump_possible(drift, cfg)
    steps = grid.size - 1
    has_final = cfg.terminal_clip > 0.0
    stored_times = grid[store_idx]
    if has_final:
        stored_times = np.append(stored_times, cfg.t_end)

    block = max(64, min(path_count, int(4e7 / (max(steps, 1) * dim * 8)) or 64))
    out = np.empty((path_count, stored_times.size, dim))

    def run_block(lo, hi):
        seeds = derive_path_seed(cfg.seed, np.arange(lo, hi, dtype=np.uint64))
        gens = [np.random.Generator(np.random.PCG64(int(sd))) for sd in seeds]
        xi = np.stack([gen.standard_normal((steps, dim)) for gen in gens])
        x = np.zeros((hi - lo, dim))
        si = 0
        if store_idx[si] == 0:
            out[lo:hi, 0] = x
            si += 1
        for k in range(steps):
            b = drift(float(grid[k]), x)
            x = x + b * dts[k] + g_vals[k] * math.sqrt(dts[k]) * xi[:, k]
            if not np.all(np.isfinite(x)):
                bad = int(np.nonzero(~np.isfinite(x).reshape(hi - lo, -1).all(axis=1))[0][0])
                raise SimulationDivergenceError(
                    f"path {lo + bad} diverged at t = {grid[k + 1]!r}",
                    path_index=lo + bad, t=float(grid[k + 1]),
                )
            if si < store_idx.size and store_idx[si] == k + 1:
                out[lo:hi, si] = x
                si += 1
        if jump:
            out[lo:hi, -1] = _jump_to_target(drift, float(grid[-1]), x, gens)
        elif has_final:
            # Non-oracle drifts finish with one plain Euler step.
            dt = cfg.terminal_clip
            b = drift(float(grid[-1]), x)
            xf = x + b * dt + g(float(grid[-1])) * math.sqrt(dt) * np.stack(
                [gen.standard_normal(dim) for gen in gens])
            out[lo:hi, -1] = xf

    ranges = list(_block_ranges(path_count, block))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(lambda r: run_block(*r), ranges))
    else:
        for r in ranges:
            run_block(*r)

    return PathEnsemble(
        times=stored_times, paths=out, seed=cfg.seed,
        drift_descriptor=getattr(drift, "describe", lambda: {"kind": "custom"})(),
        g_descriptor={"name": getattr(g, "name", "custom")},
    )


# ---------------------------------------------------------------------------
# Singular-initial-time integrator
# ---------------------------------------------------------------------------

def simulate_singular(p: float, x0, drift, g: Callable[[float], float],
                      cfg: IntegratorConfig, path_count: int,
                      dim: Optional[int] = None, threads: int = 1) -> PathEnsemble:
    """Integrate X_s = x0 + s^{-p} (int_0^s u^p b_u(X_u) du + int_0^s u^p g_u dW_u).

    The first grid step is treated exactly with the drift frozen at x0:
    deterministic part by 64-point Gauss-Legendre quadrature of u^p b_u(x0),
    noise with the exact variance int_0^{s_1} u^{2p} g_u^2 du.  Subsequent
    steps advance the transformed variable M_s = s^p (X_s - x0) by
    Euler-Maruyama.  With a terminal clip, oracle-backed drifts are
    completed at t_end = 1 exactly like ``simulate``.
    """
    if p <= 0.0:
        raise DomainError("p must be positive")
    if cfg.t_start != 0.0:
        raise DomainError("the singular integrator starts at t = 0")
    if dim is None:
        dim = getattr(drift, "dim", None) or getattr(
            getattr(drift, "target", None), "dim", None) or 1
    x0 = np.broadcast_to(np.asarray(x0, dtype=float).reshape(-1), (dim,)).astype(float)

    grid, store_idx = _build_grid(cfg)
    dts = np.diff(grid)
    steps = grid.size - 1
    s1 = float(grid[1])
    jump = _terminal_jump_possible(drift, cfg)
    has_final = cfg.terminal_clip > 0.0

    # First-step quantities (shared across paths).
    drift_int = np.zeros(dim)
    nodes, weights = _GL64
    mid, half = 0.5 * s1, 0.5 * s1
    for u, w in zip(nodes, weights):
        uu = mid + half * u
        drift_int += half * w * uu**p * np.asarray(
            drift(uu, x0.reshape(1, dim))).reshape(dim)
    noise_var1 = _gauss_legendre(lambda u: u ** (2 * p) * g(u) ** 2, 0.0, s1, _GL64)

    g_vals = np.array([g(float(t)) for t in grid[:-1]])
    stored_times = grid[store_idx]
    if has_final:
        stored_times = np.append(stored_times, cfg.t_end)
    out = np.empty((path_count, stored_times.size, dim))
    block = max(64, min(path_count, int(4e7 / (max(steps, 1) * dim * 8)) or 64))

    def run_block(lo, hi):
        seeds = derive_path_seed(cfg.seed, np.arange(lo, hi, dtype=np.uint64))
        gens = [np.random.Generator(np.random.PCG64(int(sd))) for sd in seeds]
        xi = np.stack([gen.standard_normal((steps, dim)) for gen in gens])
        nb = hi - lo
        si = 0
        if store_idx[si] == 0:
            out[lo:hi, si] = x0
            si += 1
        # Exact first step.
        m = drift_int + math.sqrt(noise_var1) * xi[:, 0]
        x = x0 + m / s1**p
        if si < store_idx.size and store_idx[si] == 1:
            out[lo:hi, si] = x
            si += 1
        for k in range(1, steps):
            s_k = float(grid[k])
            b = drift(s_k, x)
            m = m + s_k**p * b * dts[k] + s_k**p * g_vals[k] * math.sqrt(dts[k]) * xi[:, k]
            if not np.all(np.isfinite(m)):
                bad = int(np.nonzero(~np.isfinite(m).reshape(nb, -1).all(axis=1))[0][0])
                raise SimulationDivergenceError(
                    f"path {lo + bad} diverged at t = {grid[k + 1]!r}",
                    path_index=lo + bad, t=float(grid[k + 1]),
                )
            x = x0 + m / float(grid[k + 1]) ** p
            if si < store_idx.size and store_idx[si] == k + 1:
                out[lo:hi, si] = x
                si += 1
        if jump:
            out[lo:hi, -1] = _jump_to_target(drift, float(grid[-1]), x, gens)
        elif has_final:
            dt = cfg.terminal_clip
            b = drift(float(grid[-1]), x)
            out[lo:hi, -1] = x + b * dt + g(float(grid[-1])) * math.sqrt(dt) * np.stack(
                [gen.standard_normal(dim) for gen in gens])

    ranges = list(_block_ranges(path_count, block))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(lambda r: run_block(*r), ranges))
    else:
        for r in ranges:
            run_block(*r)

    return PathEnsemble(
        times=stored_times, paths=out, seed=cfg.seed,
        drift_descriptor={
            "kind": "singular", "p": p, "x0": x0.tolist(),
            "inner": getattr(drift, "describe", lambda: {"kind": "custom"})(),
        },
        g_descriptor={"name": getattr(g, "name", "custom")},
    )


# ---------------------------------------------------------------------------
# Exact simulation of the linear reference process
# ---------------------------------------------------------------------------

def simulate_reference(a: Callable[[float], float], g: Callable[[float], float],
                       cfg: IntegratorConfig, path_count: int, dim: int = 1,
                       threads: int = 1) -> PathEnsemble:
    """Simulate dY = a_t Y dt + g_t dW exactly in law.

    Each step uses the integrating-factor update
    Y_{t+dt} = (r_{t+dt}/r_t) Y_t + N(0, v) with
    v = int_t^{t+dt} (r_{t+dt}/r_u)^2 g_u^2 du, both evaluated by
    Gauss-Legendre quadrature, so the update is exact up to quadrature error.
    """
    grid, store_idx = _build_grid(cfg)
    steps = grid.size - 1

    ratios = np.empty(steps)
    variances = np.empty(steps)
    for k in range(steps):
        lo, hi = float(grid[k]), float(grid[k + 1])
        ratios[k] = math.exp(_gauss_legendre(a, lo, hi, _GL16))

        def integrand(u):
            return math.exp(2.0 * _gauss_legendre(a, u, hi, _GL8)) * g(u) ** 2

        variances[k] = max(_gauss_legendre(integrand, lo, hi, _GL16), 0.0)
    stds = np.sqrt(variances)

    stored_times = grid[store_idx]
    out = np.empty((path_count, stored_times.size, dim))
    block = max(64, min(path_count, int(4e7 / (max(steps, 1) * dim * 8)) or 64))

    def run_block(lo, hi):
        seeds = derive_path_seed(cfg.seed, np.arange(lo, hi, dtype=np.uint64))
        gens = [np.random.Generator(np.random.PCG64(int(sd))) for sd in seeds]
        xi = np.stack([gen.standard_normal((steps, dim)) for gen in gens])
        y = np.zeros((hi - lo, dim))
        si = 0
        if store_idx[si] == 0:
            out[lo:hi, si] = y
            si += 1
        for k in range(steps):
            y = ratios[k] * y + stds[k] * xi[:, k]
            if si < store_idx.size and store_idx[si] == k + 1:
                out[lo:hi, si] = y
                si += 1

    ranges = list(_block_ranges(path_count, block))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(lambda r: run_block(*r), ranges))
    else:
        for r in ranges:
            run_block(*r)

    return PathEnsemble(
        times=stored_times, paths=out, seed=cfg.seed,
        drift_descriptor={"kind": "reference", "a": getattr(a, "name", "custom")},
        g_descriptor={"name": getattr(g, "name", "custom")},
    )
