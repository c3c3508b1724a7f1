"""Truncated Heston model, the (Phi, Psi) coordinate transform and the
one-step trinomial transition kernels of the lattice approximation.

Coordinates: ``Phi = ln S`` and ``Psi = nu / sigma - rho * Phi`` are driven by
independent Brownian motions.  On the lattice both move by ``a * xi`` with
``xi in {-1, 0, 1}`` and ``a = sigma_tilde * sqrt(T / n)``.  Node ``(k, i, j)``
sits at ``Phi = phi0 + i a``, ``Psi = psi0 + j a``.

Probability arrays produced by the vectorised helpers are indexed by
``move + 1``, i.e. ``[..., 0]`` is the down move, ``[..., 1]`` the middle and
``[..., 2]`` the up move.  The public :class:`TransitionKernel` reports
triples in ``(up, mid, down)`` order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np


class Projection(str, Enum):
    """Rules mapping raw (possibly invalid) probability triples to valid ones."""

    NONE = "none"
    PS1 = "ps1"  # clip to [0, 1], middle absorbs the remainder
    PS2 = "ps2"  # shrink the drift term, keep the variance term
    PS3 = "ps3"  # renormalise max(raw, 0)


class Measure(str, Enum):
    PHYSICAL = "physical"
    MARTINGALE = "martingale"


class KernelError(ValueError):
    """Raw kernel left [0, 1] and no projection was requested."""

    def __init__(self, node, raw):
        self.node = node
        self.raw = tuple(float(r) for r in raw)
        super().__init__(f"invalid raw transition probabilities {self.raw} at node {node}")


@dataclass(frozen=True)
class HestonParams:
    mu: float
    kappa: float
    theta: float
    sigma: float
    rho: float
    s0: float
    nu0: float
    maturity: float
    strike: float

    def __post_init__(self):
        for name in ("kappa", "theta", "sigma", "s0", "nu0", "maturity", "strike"):
            value = getattr(self, name)
            if not (value > 0 and math.isfinite(value)):
                raise ValueError(f"{name} must be strictly positive, got {value}")
        if not -1.0 < self.rho < 1.0:
            raise ValueError(f"rho must lie in (-1, 1), got {self.rho}")
        if not 2.0 * self.kappa * self.theta > self.sigma**2:
            raise ValueError(
                "Feller condition 2*kappa*theta > sigma^2 violated "
                f"({2 * self.kappa * self.theta} <= {self.sigma ** 2})"
            )

    @classmethod
    def table1(cls) -> "HestonParams":
        """Parameter set of the reference shortfall tables."""
        return cls(mu=0.05, kappa=1.15, theta=0.348, sigma=0.39, rho=-0.64,
                   s0=100.0, nu0=0.09, maturity=1.0, strike=90.0)


@dataclass(frozen=True)
class TruncationBounds:
    sigma_lo: float
    sigma_hi: float

    def __post_init__(self):
        if not 0.0 < self.sigma_lo < self.sigma_hi:
            raise ValueError(
                f"need 0 < sigma_lo < sigma_hi, got {self.sigma_lo}, {self.sigma_hi}"
            )

    @classmethod
    def table1(cls) -> "TruncationBounds":
        return cls(sigma_lo=1e-4, sigma_hi=1.0)

    @classmethod
    def _unchecked(cls, sigma_lo: float, sigma_hi: float) -> "TruncationBounds":
        # degenerate sigma_lo == sigma_hi (constant variance) used by a few probes
        obj = object.__new__(cls)
        object.__setattr__(obj, "sigma_lo", float(sigma_lo))
        object.__setattr__(obj, "sigma_hi", float(sigma_hi))
        return obj

    @classmethod
    def constant(cls, vol: float) -> "TruncationBounds":
        """Both barriers at ``vol``: the clamp pins the variance to ``vol**2``."""
        if not vol > 0:
            raise ValueError("vol must be positive")
        return cls._unchecked(vol, vol)


@dataclass(frozen=True)
class LatticeSpec:
    n: int
    sigma_tilde: float
    step: float
    phi0: float
    psi0: float
    maturity: float
    exp_up: float = field(repr=False)
    exp_down: float = field(repr=False)

    @classmethod
    def build(cls, n: int, sigma_tilde: float, params: HestonParams,
              bounds: TruncationBounds) -> "LatticeSpec":
        if n < 0 or int(n) != n:
            raise ValueError(f"n must be a non-negative integer, got {n}")
        if sigma_tilde < bounds.sigma_hi:
            raise ValueError(
                f"sigma_tilde={sigma_tilde} must be >= sigma_hi={bounds.sigma_hi}"
            )
        n = int(n)
        step = sigma_tilde * math.sqrt(params.maturity / n) if n > 0 else 0.0
        phi0 = math.log(params.s0)
        psi0 = params.nu0 / params.sigma - params.rho * phi0
        return cls(n=n, sigma_tilde=float(sigma_tilde), step=step, phi0=phi0, psi0=psi0,
                   maturity=params.maturity, exp_up=math.exp(step), exp_down=math.exp(-step))

    @property
    def dt(self) -> float:
        return self.maturity / self.n

    @property
    def sqrt_dt(self) -> float:
        return math.sqrt(self.maturity / self.n)

    def state_count(self) -> int:
        """Number of lattice nodes summed over all time steps."""
        return sum((2 * k + 1) ** 2 for k in range(self.n + 1))


@dataclass(frozen=True)
class NodeState:
    k: int
    i: int
    j: int

    def __post_init__(self):
        if self.k < 0 or abs(self.i) > self.k or abs(self.j) > self.k:
            raise ValueError(f"node ({self.k}, {self.i}, {self.j}) outside the lattice")


@dataclass(frozen=True)
class CoeffSet:
    mu_phi: float
    sigma_phi: float
    mu_psi: float
    sigma_psi: float


@dataclass(frozen=True)
class DriftFunctional:
    """Bounded rule ``upsilon(k, i)`` used as the Girsanov kernel on the
    Psi-noise.  ``rule`` must accept an integer ``k`` and an integer array ``i``."""

    rule: Callable
    bound: float

    def __call__(self, k, i):
        i = np.asarray(i)
        values = np.broadcast_to(np.asarray(self.rule(k, i), dtype=np.float64), i.shape)
        if np.any(np.abs(values) > self.bound):
            raise ValueError(f"drift functional exceeds its declared bound {self.bound}")
        return values

    @classmethod
    def zero(cls) -> "DriftFunctional":
        return cls(_zero_rule, 0.0)

    @classmethod
    def constant(cls, value: float) -> "DriftFunctional":
        return cls(_ConstantRule(float(value)), abs(float(value)))


def _zero_rule(k, i):
    return 0.0


@dataclass(frozen=True)
class _ConstantRule:
    value: float

    def __call__(self, k, i):
        return self.value


def clamp_variance(z, bounds: TruncationBounds):
    """``h(z) = max(sigma_lo^2, min(z, sigma_hi^2))``; works on scalars and arrays."""
    out = np.maximum(bounds.sigma_lo**2, np.minimum(z, bounds.sigma_hi**2))
    return float(out) if np.ndim(out) == 0 else out


def coefficients(y, z, params: HestonParams, bounds: TruncationBounds):
    """Vectorised drift/diffusion coefficients of (Phi, Psi) at points (y, z)."""
    h = clamp_variance(params.sigma * (params.rho * np.asarray(y) + np.asarray(z)), bounds)
    return _coefficients_from_h(h, params)


def _coefficients_from_h(h, params: HestonParams):
    mu_phi = params.mu - h / 2.0
    sigma_phi = np.sqrt(h)
    mu_psi = params.kappa / params.sigma * (params.theta - h) - params.rho * mu_phi
    sigma_psi = math.sqrt(1.0 - params.rho**2) * sigma_phi
    return mu_phi, sigma_phi, mu_psi, sigma_psi


def transform_coeffs(y: float, z: float, params: HestonParams,
                     bounds: TruncationBounds) -> CoeffSet:
    mu_phi, sigma_phi, mu_psi, sigma_psi = coefficients(y, z, params, bounds)
    return CoeffSet(float(mu_phi), float(sigma_phi), float(mu_psi), float(sigma_psi))


def node_variance(k_i, j, spec: LatticeSpec, params: HestonParams):
    """Unclamped variance ``sigma * (Psi + rho * Phi)`` at lattice indices (i, j)."""
    i = np.asarray(k_i, dtype=np.float64)
    j = np.asarray(j, dtype=np.float64)
    # equals sigma*(psi0 + j a + rho (phi0 + i a)) without the phi0 cancellation
    return params.nu0 + params.sigma * spec.step * (j + params.rho * i)


def node_values(node: NodeState, spec: LatticeSpec, params: HestonParams):
    """Return ``(phi, psi, nu_raw, price)`` at a lattice node."""
    if node.k > spec.n:
        raise ValueError(f"node time index {node.k} exceeds n={spec.n}")
    phi = spec.phi0 + node.i * spec.step
    psi = spec.psi0 + node.j * spec.step
    nu_raw = float(node_variance(node.i, node.j, spec, params))
    price = params.s0 * math.exp(node.i * spec.step)
    return phi, psi, nu_raw, price


# ---------------------------------------------------------------- projection

def project(raw: np.ndarray, scheme: Projection):
    """Project raw triples (last axis, any order) onto valid distributions.

    Returns ``(published, projected_mask)``.  Triples already inside [0, 1]
    are returned unchanged bit for bit.  The middle entry must sit at index 1.
    """
    raw = np.asarray(raw, dtype=np.float64)
    bad = np.any((raw < 0.0) | (raw > 1.0), axis=-1)
    if not np.any(bad):
        return raw.copy(), bad
    scheme = Projection(scheme)
    if scheme is Projection.NONE:
        idx = tuple(int(v) for v in np.argwhere(bad)[0])
        raise KernelError(idx, raw[idx])
    fixed = raw[bad]
    lo, mid, hi = fixed[:, 0], fixed[:, 1], fixed[:, 2]
    if scheme is Projection.PS1:
        lo = np.clip(lo, 0.0, 1.0)
        hi = np.clip(hi, 0.0, 1.0)
        mid = 1.0 - lo - hi
        over = mid < 0.0
        if np.any(over):
            tot = lo[over] + hi[over]
            lo[over] = lo[over] / tot
            hi[over] = hi[over] / tot
            mid[over] = 0.0
    elif scheme is Projection.PS2:
        var = lo + hi
        half = var / 2.0
        drift = np.clip((hi - lo) / 2.0, -half, half)
        lo, hi = half - drift, half + drift
        mid = 1.0 - var
        if np.any(mid < 0.0) or np.any(var < 0.0):
            raise KernelError(tuple(int(v) for v in np.argwhere(bad)[0]),
                              raw[tuple(np.argwhere(bad)[0])])
    elif scheme is Projection.PS3:
        pos = np.maximum(fixed, 0.0)
        pos = pos / pos.sum(axis=1, keepdims=True)
        lo, mid, hi = pos[:, 0], pos[:, 1], pos[:, 2]
    out = raw.copy()
    out[bad] = np.stack([lo, mid, hi], axis=1)
    return out, bad


# ------------------------------------------------------------ raw kernels

def _triples(var_ratio, drift_term):
    """Stack (down, mid, up) = (v/2 - d, 1 - v, v/2 + d) on a new last axis."""
    var_ratio = np.asarray(var_ratio, dtype=np.float64)
    drift_term = np.broadcast_to(np.asarray(drift_term, dtype=np.float64), var_ratio.shape)
    half = var_ratio / 2.0
    return np.stack([half - drift_term, 1.0 - var_ratio, half + drift_term], axis=-1)


def raw_kernels(k: int, i, j, spec: LatticeSpec, params: HestonParams,
                bounds: TruncationBounds, measure: Measure = Measure.PHYSICAL,
                upsilon: DriftFunctional | None = None):
    """Raw (unprojected) xi and xi-hat triples at nodes (k, i, j).

    Returns arrays of shape ``broadcast(i, j).shape + (3,)`` ordered by
    ``move + 1``.
    """
    measure = Measure(measure)
    i = np.asarray(i)
    j = np.asarray(j)
    h = clamp_variance(node_variance(i, j, spec, params), bounds)
    h = np.asarray(h, dtype=np.float64)
    mu_phi, sigma_phi, mu_psi, sigma_psi = _coefficients_from_h(h, params)
    st2 = spec.sigma_tilde**2
    coef = spec.sqrt_dt / (2.0 * spec.sigma_tilde)
    var_psi = sigma_psi**2 / st2
    if measure is Measure.PHYSICAL:
        xi = _triples(h / st2, coef * mu_phi)
        xihat = _triples(var_psi, coef * mu_psi)
    else:
        up = h / (st2 * (1.0 + spec.exp_up))
        down = h / (st2 * (1.0 + spec.exp_down))
        xi = np.stack([down, 1.0 - h / st2, up], axis=-1)
        ups = (upsilon or DriftFunctional.zero())(k, np.broadcast_to(i, h.shape))
        xihat = _triples(var_psi, coef * (ups * sigma_psi + mu_psi))
    return xi, xihat


def step_kernels(k: int, spec: LatticeSpec, params: HestonParams, bounds: TruncationBounds,
                 measure: Measure = Measure.PHYSICAL, projection: Projection = Projection.PS1,
                 upsilon: DriftFunctional | None = None):
    """Published kernels for every node of time step ``k``.

    Returns ``(px, py, proj_x, proj_y)``; ``px``/``py`` have shape
    ``(2k+1, 2k+1, 3)`` indexed ``[i + k, j + k, move + 1]``.
    """
    idx = np.arange(-k, k + 1)
    ii, jj = np.meshgrid(idx, idx, indexing="ij")
    xi, xihat = raw_kernels(k, ii, jj, spec, params, bounds, measure, upsilon)
    try:
        px, proj_x = project(xi, projection)
        py, proj_y = project(xihat, projection)
    except KernelError as err:
        a, b = err.node[:2]
        raise KernelError((k, int(idx[a]), int(idx[b])), err.raw) from None
    return px, py, proj_x, proj_y


@dataclass(frozen=True)
class TransitionKernel:
    p_xi: tuple          # (up, mid, down)
    p_xihat: tuple       # (up, mid, down)
    measure: Measure
    projected: tuple     # (xi, xi-hat)
    raw: tuple           # (xi up, mid, down, xi-hat up, mid, down)
    scheme: Projection = Projection.NONE
    upsilon: DriftFunctional | None = None

    @property
    def raw_xi(self):
        return self.raw[:3]

    @property
    def raw_xihat(self):
        return self.raw[3:]


def _node_kernel(node, spec, params, bounds, measure, projection, upsilon):
    if node.k >= spec.n:
        raise ValueError(f"node at k={node.k} has no outgoing transition (n={spec.n})")
    xi, xihat = raw_kernels(node.k, np.array(node.i), np.array(node.j), spec, params,
                            bounds, measure, upsilon)
    try:
        px, bx = project(xi, projection)
        py, by = project(xihat, projection)
    except KernelError as err:
        raise KernelError((node.k, node.i, node.j), err.raw) from None
    rev = lambda t: (float(t[2]), float(t[1]), float(t[0]))  # noqa: E731
    return TransitionKernel(
        p_xi=rev(px), p_xihat=rev(py), measure=Measure(measure),
        projected=(bool(bx), bool(by)), raw=rev(xi) + rev(xihat),
        scheme=Projection(projection), upsilon=upsilon,
    )


def physical_kernel(node: NodeState, spec: LatticeSpec, params: HestonParams,
                    bounds: TruncationBounds,
                    projection: Projection = Projection.PS1) -> TransitionKernel:
    """Moment-matching kernel of the physical measure at ``node``."""
    return _node_kernel(node, spec, params, bounds, Measure.PHYSICAL, projection, None)


def martingale_kernel(node: NodeState, spec: LatticeSpec, params: HestonParams,
                      bounds: TruncationBounds, upsilon: DriftFunctional | None = None,
                      projection: Projection = Projection.PS1) -> TransitionKernel:
    """Kernel of the martingale measure indexed by ``upsilon``.  The xi triple
    makes ``exp(Phi)`` a martingale; the xi-hat drift is shifted by
    ``upsilon * sigma_psi``."""
    return _node_kernel(node, spec, params, bounds, Measure.MARTINGALE, projection,
                        upsilon or DriftFunctional.zero())


def min_valid_n(params: HestonParams, bounds: TruncationBounds, sigma_tilde: float,
                upsilon_bound: float = 0.0, cap: int = 10**9):
    """Smallest n for which every raw kernel (physical and martingale) lies in
    [0, 1] for all clamped variances ``h`` in ``[sigma_lo^2, sigma_hi^2]``.

    A triple ``v/2 +- sqrt(T/n) d / (2 sigma_tilde)`` with ``v <= 1`` is valid
    iff ``sqrt(T/n) |d| <= v sigma_tilde``, i.e. ``n >= T (|d| / (v sigma_tilde))^2``.
    ``|d| / v`` is monotone in ``1/h`` for the drift-only terms, so the worst
    case sits at a barrier.  The
    upsilon term is bounded separately (conservative).

    Returns ``math.inf`` when the answer exceeds ``cap``.
    """
    if sigma_tilde < bounds.sigma_hi:
        raise ValueError("sigma_tilde must be >= sigma_hi")
    worst = 0.0
    one_minus_r2 = 1.0 - params.rho**2
    for h in (bounds.sigma_lo**2, bounds.sigma_hi**2):
        mu_phi, _, mu_psi, sigma_psi = _coefficients_from_h(h, params)
        worst = max(worst, abs(mu_phi) / h, abs(mu_psi) / (one_minus_r2 * h))
    if upsilon_bound:
        h_lo = bounds.sigma_lo**2
        worst_psi = max(abs(_coefficients_from_h(h, params)[2]) / (one_minus_r2 * h)
                        for h in (h_lo, bounds.sigma_hi**2))
        worst = max(worst, worst_psi + upsilon_bound / math.sqrt(one_minus_r2 * h_lo))
    if worst == 0.0:
        return 1
    required = params.maturity * (sigma_tilde * worst) ** 2
    if required > cap:
        return math.inf
    n = max(1, math.ceil(required))
    # guard the ceil against rounding in ``required``
    while n > 1 and sigma_tilde * worst * math.sqrt(params.maturity / (n - 1)) <= 1.0:
        n -= 1
    while sigma_tilde * worst * math.sqrt(params.maturity / n) > 1.0:
        n += 1
    return n
