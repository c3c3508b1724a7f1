"""Monte Carlo references for the truncated and the raw Heston dynamics.

Random numbers come from Philox streams keyed by ``(seed, block)``; a block is
a fixed run of consecutive path indices, so a path's normals depend only on
the seed and its index, never on how blocks are spread over workers.  All
reductions happen on arrays ordered by path index.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np

from .model import HestonParams, TruncationBounds

BLOCK_PATHS = 65536
_CHUNK_STEPS = 32


@dataclass(frozen=True)
class McConfig:
    paths: int
    dt: float = 1e-3
    seed: int = 0
    antithetic: bool = False
    workers: int = 1

    def __post_init__(self):
        if self.paths < 1:
            raise ValueError("paths must be >= 1")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 bits")
        if self.antithetic and self.paths % 2:
            raise ValueError("antithetic sampling needs an even path count")

    def steps(self, maturity: float) -> int:
        """Number of Euler steps; the step is shrunk to ``maturity / steps``."""
        if self.dt > maturity * (1 + 1e-12):
            raise ValueError("dt must not exceed the maturity")
        return max(1, math.ceil(maturity / self.dt - 1e-9))


@dataclass(frozen=True)
class McEstimate:
    mean: float
    stderr: float
    paths: int
    seed: int

    def within(self, target: float, k: float = 3.0, floor: float = 0.0) -> bool:
        return abs(self.mean - target) <= max(k * self.stderr, floor)


@dataclass
class PathSamples:
    """Terminal values and running extrema of the variance state, by path index."""
    s_T: np.ndarray
    nu_T: np.ndarray
    nu_min: np.ndarray
    nu_max: np.ndarray
    antithetic: bool = False
    seed: int = 0


# ----------------------------------------------------------------- kernels

@numba.njit(nogil=True, cache=True)
def _advance(z, log_s, nu, nu_min, nu_max, kind, mu, kappa, theta, sigma, rho,
             lo2, hi2, dt):
    """Advance every path through the steps in ``z`` (steps, paths, 2).

    kind 0: truncated model, h applied in drift and diffusion.
    kind 1: raw Heston, full truncation.
    kind 2: the alpha process, full truncation (price ignored).
    """
    sq = math.sqrt(dt)
    rc = math.sqrt(1.0 - rho * rho)
    for p in range(z.shape[1]):
        x = log_s[p]
        v = nu[p]
        vmin = nu_min[p]
        vmax = nu_max[p]
        for t in range(z.shape[0]):
            z1 = z[t, p, 0]
            z2 = z[t, p, 1]
            if kind == 0:
                w = v if v < hi2 else hi2
                w = w if w > lo2 else lo2
                dz = rho * z1 + rc * z2
                x += (mu - 0.5 * w) * dt + math.sqrt(w) * sq * z1
                v += kappa * (theta - w) * dt + sigma * math.sqrt(w) * sq * dz
            elif kind == 1:
                w = v if v > 0.0 else 0.0
                dz = rho * z1 + rc * z2
                x += (mu - 0.5 * w) * dt + math.sqrt(w) * sq * z1
                v += kappa * (theta - w) * dt + sigma * math.sqrt(w) * sq * dz
            else:
                w = v if v > 0.0 else 0.0
                v += (kappa * (theta - w) + sigma * rho * w) * dt + sigma * math.sqrt(w) * sq * z1
            if v < vmin:
                vmin = v
            if v > vmax:
                vmax = v
        log_s[p] = x
        nu[p] = v
        nu_min[p] = vmin
        nu_max[p] = vmax


_KIND = {"truncated": 0, "raw": 1, "alpha": 2}


def _block_sizes(paths: int):
    full, rest = divmod(paths, BLOCK_PATHS)
    return [BLOCK_PATHS] * full + ([rest] if rest else [])


def _run_block(block: int, size: int, kind: str, params: HestonParams,
               bounds: TruncationBounds | None, cfg: McConfig):
    steps = cfg.steps(params.maturity)
    dt = params.maturity / steps
    gen = np.random.Generator(np.random.Philox(key=np.array([cfg.seed, block], dtype=np.uint64)))
    drawn = size // 2 if cfg.antithetic else size
    log_s = np.full(size, math.log(params.s0))
    nu = np.full(size, params.nu0)
    nu_min = nu.copy()
    nu_max = nu.copy()
    lo2 = bounds.sigma_lo**2 if bounds is not None else 0.0
    hi2 = bounds.sigma_hi**2 if bounds is not None else math.inf
    buf = np.empty((_CHUNK_STEPS, drawn, 2))
    zbuf = np.empty((_CHUNK_STEPS, size, 2)) if cfg.antithetic else None
    done = 0
    while done < steps:
        m = min(_CHUNK_STEPS, steps - done)
        z = buf[:m]
        gen.standard_normal(out=z)
        if cfg.antithetic:
            zz = zbuf[:m]
            zz[:, :drawn] = z
            np.negative(z, out=zz[:, drawn:])
            z = zz
        _advance(z, log_s, nu, nu_min, nu_max, _KIND[kind], params.mu, params.kappa,
                 params.theta, params.sigma, params.rho, lo2, hi2, dt)
        done += m
    return np.exp(log_s), nu, nu_min, nu_max


def _simulate(kind: str, params: HestonParams, bounds: TruncationBounds | None,
              cfg: McConfig) -> PathSamples:
    sizes = _block_sizes(cfg.paths)
    if cfg.antithetic and any(s % 2 for s in sizes):
        raise ValueError("antithetic sampling needs even block sizes")
    jobs = list(enumerate(sizes))

    def work(job):
        return _run_block(job[0], job[1], kind, params, bounds, cfg)

    if cfg.workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            parts = list(pool.map(work, jobs))
    else:
        parts = [work(j) for j in jobs]
    cols = [np.concatenate([p[c] for p in parts]) for c in range(4)]
    return PathSamples(*cols, antithetic=cfg.antithetic, seed=cfg.seed)


def simulate_truncated(params: HestonParams, bounds: TruncationBounds,
                       cfg: McConfig) -> PathSamples:
    """Log-Euler for S and Euler for nu with the variance clamp applied in
    both drift and diffusion at every step."""
    return _simulate("truncated", params, bounds, cfg)


def simulate_raw(params: HestonParams, cfg: McConfig) -> PathSamples:
    """Unmodified Heston with full truncation of the variance."""
    return _simulate("raw", params, None, cfg)


# -------------------------------------------------------------- estimators

def _pair_means(values: np.ndarray, antithetic: bool) -> np.ndarray:
    """Collapse antithetic partners (first and second half of each block)."""
    if not antithetic:
        return values
    out = []
    start = 0
    for size in _block_sizes(len(values)):
        half = size // 2
        blk = values[start:start + size]
        out.append(0.5 * (blk[:half] + blk[half:]))
        start += size
    return np.concatenate(out)


def estimate(values: np.ndarray, seed: int = 0, antithetic: bool = False) -> McEstimate:
    values = np.asarray(values, dtype=np.float64)
    units = _pair_means(values, antithetic)
    mean = float(np.mean(units))
    se = float(np.std(units, ddof=1) / math.sqrt(len(units))) if len(units) > 1 else 0.0
    return McEstimate(mean, se, len(values), seed)


def mc_unhedged(params: HestonParams, bounds: TruncationBounds, cfg: McConfig, x,
                samples: PathSamples | None = None):
    """``-E[((S_T - K)^+ - x)^+]`` on truncated-model terminals.

    One simulation serves every entry of an array ``x``.
    """
    if samples is None:
        samples = simulate_truncated(params, bounds, cfg)
    payoff = np.maximum(samples.s_T - params.strike, 0.0)
    xs = np.atleast_1d(np.asarray(x, dtype=np.float64))
    out = [estimate(-np.maximum(payoff - xv, 0.0), cfg.seed, samples.antithetic) for xv in xs]
    return out[0] if np.ndim(x) == 0 else out


@dataclass(frozen=True)
class ExitStats:
    sigma_lo: float
    sigma_hi: float
    p_exit: McEstimate
    p_no_exit: McEstimate
    p_hit_lo: McEstimate
    p_hit_hi: McEstimate


MONITORING = ("grid", "terminal")


def _exit_from_samples(samples: PathSamples, sigma_lo: float, sigma_hi: float,
                       seed: int, monitoring: str = "grid") -> ExitStats:
    if monitoring == "grid":
        hit_lo = samples.nu_min <= sigma_lo**2
        hit_hi = samples.nu_max >= sigma_hi**2
    elif monitoring == "terminal":
        hit_lo = samples.nu_T <= sigma_lo**2
        hit_hi = samples.nu_T >= sigma_hi**2
    else:
        raise ValueError(f"monitoring must be one of {MONITORING}, got {monitoring!r}")
    ex = hit_lo | hit_hi
    est = lambda flag: estimate(flag.astype(np.float64), seed, samples.antithetic)  # noqa: E731
    return ExitStats(sigma_lo, sigma_hi, est(ex), est(~ex), est(hit_lo), est(hit_hi))


def exit_stats(params: HestonParams, bounds: TruncationBounds, cfg: McConfig,
               samples: PathSamples | None = None, monitoring: str = "grid") -> ExitStats:
    """Exit of the raw volatility from ``(sigma_lo, sigma_hi)`` before T.

    ``monitoring="grid"`` checks the barriers at every Euler step (first-exit
    time on the grid).  ``"terminal"`` only checks ``sqrt(nu_T)``; this is the
    convention that reproduces the published barrier-sensitivity table.
    """
    if samples is None:
        samples = simulate_raw(params, cfg)
    return _exit_from_samples(samples, bounds.sigma_lo, bounds.sigma_hi, cfg.seed, monitoring)


def exit_stats_sweep(params: HestonParams, sigma_lo: float, sigma_his, cfg: McConfig,
                     monitoring: str = "grid", samples: PathSamples | None = None):
    """Exit statistics for several upper barriers from a single raw simulation."""
    if samples is None:
        samples = simulate_raw(params, cfg)
    return [_exit_from_samples(samples, sigma_lo, float(s), cfg.seed, monitoring)
            for s in sigma_his]


def blowup_exponent(params: HestonParams) -> float:
    """Exponent of the lower-barrier tail bound, ``2 kappa theta / sigma^2 - 1``."""
    return 2.0 * params.kappa * params.theta / params.sigma**2 - 1.0


@dataclass(frozen=True)
class AlphaExitStats:
    sigma_lo: float
    p_lo: McEstimate
    p_hi: dict  # sigma_hi -> McEstimate of P(sup sqrt(alpha) >= sigma_hi)


def alpha_exit_stats(params: HestonParams, bounds: TruncationBounds, cfg: McConfig,
                     sigma_his=None) -> AlphaExitStats:
    """Barrier probabilities of the auxiliary square-root process with drift
    ``kappa (theta - alpha) + sigma rho alpha`` started at ``nu0``."""
    samples = _simulate("alpha", params, None, cfg)
    if sigma_his is None:
        sigma_his = (bounds.sigma_hi,)
    p_lo = estimate((samples.nu_min <= bounds.sigma_lo**2).astype(np.float64),
                    cfg.seed, cfg.antithetic)
    p_hi = {float(s): estimate((samples.nu_max >= s**2).astype(np.float64), cfg.seed,
                               cfg.antithetic) for s in sigma_his}
    return AlphaExitStats(bounds.sigma_lo, p_lo, p_hi)


def dump_terminals(samples: PathSamples, path, bounds: TruncationBounds) -> None:
    """Write per-path terminals and barrier flags as CSV."""
    hit_lo = samples.nu_min <= bounds.sigma_lo**2
    hit_hi = samples.nu_max >= bounds.sigma_hi**2
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "S_T", "nu_T", "hit_lo", "hit_hi"])
        for idx in range(len(samples.s_T)):
            w.writerow([idx, repr(float(samples.s_T[idx])), repr(float(samples.nu_T[idx])),
                        int(hit_lo[idx]), int(hit_hi[idx])])
