"""Backward dynamic programming for shortfall-risk minimisation on the lattice.

State at time step k: lattice node (i, j) and the wealth proportion
``lambda = V / S``.  A control is the post-move proportion ``c = Lambda(-1)``
after a down move; self-financing then fixes ``Lambda(0) = lambda`` and

    Lambda(1) = 1 ^ (lambda (1 + e^-a) - c e^-a).

The grid programs restrict ``lambda`` and ``c`` to ``{0, 1/M, ..., 1}`` and
round ``Lambda(1)`` down (``Bound.MINUS``) or up (``Bound.PLUS``), which
brackets the exact discrete value.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path

import numba
import numpy as np

from .model import (
    DriftFunctional,
    HestonParams,
    LatticeSpec,
    Measure,
    Projection,
    TruncationBounds,
    step_kernels,
)

log = logging.getLogger(__name__)

# numba falls back from an outdated TBB to OpenMP on its own; the notice is noise
warnings.filterwarnings("ignore", message="The TBB threading layer requires",
                        category=numba.NumbaWarning)

# inner Lambda(1) expressions within this of zero are treated as zero
ADMISSIBILITY_SLACK = 1e-12


class Bound(str, Enum):
    MINUS = "minus"
    PLUS = "plus"


class Rounding(str, Enum):
    EXACT = "exact"
    FLOOR = "floor"
    CEIL_PLUS = "ceil_plus"  # ceil(.) + 1, as in the published recursion
    CEIL = "ceil"            # natural ceil-only variant, for sensitivity runs


class AdmissibilityError(ValueError):
    pass


def payoff_shortfall(v, s, strike):
    """Shortfall utility ``-((s - K)^+ - v)^+``."""
    out = -np.maximum(np.maximum(np.asarray(s) - strike, 0.0) - np.asarray(v), 0.0)
    return float(out) if np.ndim(out) == 0 else out


def control_upper(lam: float, a: float) -> float:
    """Largest admissible ``Lambda(-1)``: ``min(1, lambda (1 + e^a))``."""
    return min(1.0, lam * (1.0 + math.exp(a)))


def lambda_up(lam: float, c: float, a: float, M: int | None = None,
              mode: Rounding = Rounding.EXACT) -> float:
    """``Lambda(1)`` given ``lambda`` and ``c = Lambda(-1)`` under a rounding mode."""
    mode = Rounding(mode)
    inner = lam * (1.0 + math.exp(-a)) - c * math.exp(-a)
    if inner < -ADMISSIBILITY_SLACK:
        raise AdmissibilityError(
            f"control c={c} infeasible for lambda={lam}: wealth after an up move is {inner}")
    inner = max(inner, 0.0)
    if mode is Rounding.EXACT:
        return min(1.0, inner)
    if M is None:
        raise ValueError("grid rounding needs M")
    return _round_index(inner * M, M, mode) / M


def _round_index(scaled: float, M: int, mode: Rounding) -> int:
    if mode is Rounding.FLOOR:
        idx = math.floor(scaled)
    elif mode is Rounding.CEIL_PLUS:
        idx = math.ceil(scaled) + 1
    elif mode is Rounding.CEIL:
        idx = math.ceil(scaled)
    else:
        raise ValueError(f"not a grid rounding: {mode}")
    return min(M, idx)


def rounding_for(bound: Bound, plus_variant: Rounding = Rounding.CEIL_PLUS) -> Rounding:
    return Rounding.FLOOR if Bound(bound) is Bound.MINUS else Rounding(plus_variant)


@dataclass(frozen=True)
class ControlGrid:
    M: int

    def __post_init__(self):
        if self.M < 1 or int(self.M) != self.M:
            raise ValueError(f"M must be a positive integer, got {self.M}")

    @property
    def values(self) -> np.ndarray:
        return np.arange(self.M + 1) / self.M

    def index_of(self, lam: float, tol: float = 1e-12) -> int:
        scaled = lam * self.M
        idx = round(scaled)
        if abs(scaled - idx) > tol * max(1.0, self.M) or not 0 <= idx <= self.M:
            raise ValueError(f"lambda={lam} is not on the grid 0, 1/{self.M}, ..., 1")
        return int(idx)


def control_tables(M: int, a: float, mode: Rounding):
    """Index tables for the grid recursion.

    ``cmax[l]``: largest feasible control index at ``lambda = l / M``.
    ``up[l, m]``: grid index of ``Lambda(1)`` for ``lambda = l/M``, ``c = m/M``
    (entries with ``m > cmax[l]`` are unused and set to ``M``).
    """
    mode = Rounding(mode)
    e_up, e_down = math.exp(a), math.exp(-a)
    cmax = np.empty(M + 1, dtype=np.int64)
    up = np.full((M + 1, M + 1), M, dtype=np.int64)
    for l in range(M + 1):
        cmax[l] = min(M, math.floor(l * (1.0 + e_up)))
        for m in range(cmax[l] + 1):
            # M * inner, written so that l == m is exact
            scaled = l + (l - m) * e_down
            up[l, m] = _round_index(max(scaled, 0.0), M, mode)
    return cmax, up


# ------------------------------------------------------------ value slices

@dataclass
class ValueSlice:
    k: int
    bound: Bound
    data: np.ndarray          # (2k+1, 2k+1, M+1)
    params_digest: bytes
    n: int
    M: int

    def root(self) -> np.ndarray:
        """Value function over the control grid at the centre node."""
        c = self.k
        return np.asarray(self.data[c, c], dtype=np.float64)


def instance_digest(spec: LatticeSpec, params: HestonParams, bounds: TruncationBounds,
                    M: int, bound: Bound, projection: Projection,
                    plus_variant: Rounding = Rounding.CEIL_PLUS,
                    precision: str = "f64") -> bytes:
    """SHA-256 of a canonical description of the full DP instance."""
    doc = {
        "params": asdict(params),
        "bounds": {"sigma_lo": bounds.sigma_lo, "sigma_hi": bounds.sigma_hi},
        "lattice": {"n": spec.n, "sigma_tilde": spec.sigma_tilde},
        "M": int(M),
        "bound": Bound(bound).value,
        "projection": Projection(projection).value,
        "rounding": rounding_for(bound, plus_variant).value,
        "precision": precision,
    }
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).digest()


def terminal_values(spec: LatticeSpec, params: HestonParams, M: int,
                    dtype=np.float64) -> np.ndarray:
    n = spec.n
    prices = params.s0 * np.exp(np.arange(-n, n + 1) * spec.step)
    lam = np.arange(M + 1) / M
    u = payoff_shortfall(lam[None, :] * prices[:, None], prices[:, None], params.strike)
    u[:, M] = 0.0
    out = np.empty((2 * n + 1, 2 * n + 1, M + 1), dtype=dtype)
    out[:] = u[:, None, :]
    return out


@numba.njit(parallel=True, cache=True)
def _backward_step(J_next, px, py, cmax, up, out):
    nk = out.shape[0]
    L = out.shape[2]
    for flat in numba.prange(nk * nk):
        a = flat // nk
        b = flat - a * nk
        H = np.empty((3, L))
        for x in range(3):
            q0 = py[a, b, 0]
            q1 = py[a, b, 1]
            q2 = py[a, b, 2]
            for l in range(L):
                H[x, l] = (q0 * J_next[a + x, b, l] + q1 * J_next[a + x, b + 1, l]) \
                    + q2 * J_next[a + x, b + 2, l]
        p0 = px[a, b, 0]
        p1 = px[a, b, 1]
        p2 = px[a, b, 2]
        for l in range(L):
            mid = p1 * H[1, l]
            best = -np.inf
            for m in range(cmax[l] + 1):
                v = (p0 * H[0, m] + mid) + p2 * H[2, up[l, m]]
                if v > best:
                    best = v
            out[a, b, l] = best


def set_threads(threads: int | None) -> None:
    if threads:
        numba.set_num_threads(min(int(threads), numba.config.NUMBA_NUM_THREADS))


def dp_grid(spec: LatticeSpec, params: HestonParams, bounds: TruncationBounds, M: int,
            bound: Bound = Bound.MINUS, projection: Projection = Projection.PS1,
            checkpoint_dir: str | Path | None = None, checkpoint_every: int = 1,
            resume: bool = False, precision: str = "f64",
            plus_variant: Rounding = Rounding.CEIL_PLUS,
            threads: int | None = None, stop_at: int | None = None) -> ValueSlice:
    """Two-sided grid recursion; returns the value slice at ``k = 0``.

    With ``checkpoint_dir`` the latest slice is written every
    ``checkpoint_every`` steps; ``resume=True`` restarts from the newest
    matching checkpoint there.  ``stop_at`` ends the run early at that step
    (used to exercise resume).
    """
    from . import checkpoint as ckpt

    grid = ControlGrid(M)
    bound = Bound(bound)
    mode = rounding_for(bound, plus_variant)
    if precision not in ("f64", "f32"):
        raise ValueError(f"precision must be f64 or f32, got {precision}")
    dtype = np.float64 if precision == "f64" else np.float32
    digest = instance_digest(spec, params, bounds, grid.M, bound, projection,
                             plus_variant, precision)
    cmax, up = control_tables(grid.M, spec.step, mode)
    set_threads(threads)

    n = spec.n
    J = None
    if resume:
        if checkpoint_dir is None:
            raise ValueError("resume requires checkpoint_dir")
        found = ckpt.latest(checkpoint_dir, bound, digest)
        if found is None:
            raise ckpt.CheckpointError(f"no checkpoint for this instance in {checkpoint_dir}")
        J = found.data.astype(dtype, copy=False)
        k_start = found.k
        log.info("resuming %s run from k=%d", bound.value, k_start)
    if J is None:
        J = terminal_values(spec, params, grid.M, dtype)
        k_start = n

    for k in range(k_start - 1, -1, -1):
        px, py, _, _ = step_kernels(k, spec, params, bounds, Measure.PHYSICAL, projection)
        out = np.empty((2 * k + 1, 2 * k + 1, grid.M + 1), dtype=dtype)
        _backward_step(J, px, py, cmax, up, out)
        J = out
        if checkpoint_dir is not None and (k % checkpoint_every == 0 or k == 0):
            ckpt.save_latest(ValueSlice(k, bound, J, digest, n, grid.M), checkpoint_dir)
        if stop_at is not None and k == stop_at:
            return ValueSlice(k, bound, J, digest, n, grid.M)
    return ValueSlice(0, bound, J, digest, n, grid.M)


def value_at(values: np.ndarray, lam: float, M: int, rule: str = "exact") -> float:
    """Read a root value function at ``lam``.

    ``rule="exact"`` insists on ``lam`` being a grid point; ``"floor"`` and
    ``"ceil"`` snap to the neighbouring grid point, ``"interp"`` interpolates.
    """
    grid = ControlGrid(M)
    if rule == "exact":
        return float(values[grid.index_of(lam)])
    scaled = lam * M
    if rule == "floor":
        return float(values[min(M, math.floor(scaled + 1e-12))])
    if rule == "ceil":
        return float(values[min(M, math.ceil(scaled - 1e-12))])
    if rule == "interp":
        return float(np.interp(lam, grid.values, values))
    raise ValueError(f"unknown rule {rule!r}")


# ------------------------------------------------------- forward induction

def forward_distribution(spec: LatticeSpec, params: HestonParams, bounds: TruncationBounds,
                         measure: Measure = Measure.PHYSICAL,
                         projection: Projection = Projection.PS1,
                         upsilon: DriftFunctional | None = None) -> np.ndarray:
    """Joint law of (i, j) at ``k = n``, shape ``(2n+1, 2n+1)``."""
    mass = np.ones((1, 1))
    for k in range(spec.n):
        px, py, _, _ = step_kernels(k, spec, params, bounds, measure, projection, upsilon)
        nxt = np.zeros((2 * k + 3, 2 * k + 3))
        size = 2 * k + 1
        for x in range(3):
            for y in range(3):
                nxt[x:x + size, y:y + size] += mass * px[:, :, x] * py[:, :, y]
        mass = nxt
    return mass


def unhedged_value(spec: LatticeSpec, params: HestonParams, bounds: TruncationBounds,
                   x, projection: Projection = Projection.PS1):
    """Lattice value of doing nothing: ``-E[((S_T - K)^+ - x)^+]`` under P_n."""
    pmf = forward_distribution(spec, params, bounds, Measure.PHYSICAL, projection).sum(axis=1)
    prices = params.s0 * np.exp(np.arange(-spec.n, spec.n + 1) * spec.step)
    payoff = np.maximum(prices - params.strike, 0.0)
    xs = np.atleast_1d(np.asarray(x, dtype=np.float64))
    vals = np.array([-np.dot(pmf, np.maximum(payoff - xv, 0.0)) for xv in xs])
    return float(vals[0]) if np.ndim(x) == 0 else vals


# --------------------------------------------------------------- sandwich

@dataclass(frozen=True)
class SandwichResult:
    x: float
    j_minus: float
    j_plus: float

    @property
    def width(self) -> float:
        return self.j_plus - self.j_minus


def sandwich_at(spec: LatticeSpec, params: HestonParams, bounds: TruncationBounds, M: int,
                x: float, projection: Projection = Projection.PS1, **kwargs) -> SandwichResult:
    """Lower and upper grid values at initial capital ``x`` (``x / s0`` must be on grid)."""
    grid = ControlGrid(M)
    idx = grid.index_of(x / params.s0)
    minus = dp_grid(spec, params, bounds, M, Bound.MINUS, projection, **kwargs).root()
    plus = dp_grid(spec, params, bounds, M, Bound.PLUS, projection, **kwargs).root()
    return SandwichResult(float(x), float(minus[idx]), float(plus[idx]))


def check_slice(vs: ValueSlice, spec: LatticeSpec, params: HestonParams, tol: float = 0.0):
    """Raise ``AssertionError`` if a slice breaks sign, range, monotonicity or the zero
    column at ``lambda = 1``."""
    data = np.asarray(vs.data, dtype=np.float64)
    floor = -max(params.s0 * math.exp(spec.n * spec.step) - params.strike, 0.0)
    if np.any(data > tol) or np.any(data < floor - tol):
        raise AssertionError("value slice outside [-(max payoff), 0]")
    if np.any(np.diff(data, axis=-1) < -tol):
        raise AssertionError("value slice not non-decreasing in lambda")
    if np.any(data[..., -1] != 0.0):
        raise AssertionError("value slice not zero at lambda = 1")
