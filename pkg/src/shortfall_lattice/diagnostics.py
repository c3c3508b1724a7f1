"""Checks on the lattice construction: moment matching, the martingale
property, likelihood-ratio moments, jump sizes and distributional distance to
Monte Carlo samples."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dp import forward_distribution
from .model import (
    DriftFunctional,
    HestonParams,
    LatticeSpec,
    Measure,
    Projection,
    TruncationBounds,
    _coefficients_from_h,
    clamp_variance,
    node_variance,
    step_kernels,
)


def lattice_prices(spec: LatticeSpec, params: HestonParams, k: int | None = None) -> np.ndarray:
    k = spec.n if k is None else k
    return params.s0 * np.exp(np.arange(-k, k + 1) * spec.step)


def _node_coefficients(k: int, spec: LatticeSpec, params: HestonParams, bounds: TruncationBounds):
    idx = np.arange(-k, k + 1)
    ii, jj = np.meshgrid(idx, idx, indexing="ij")
    h = np.asarray(clamp_variance(node_variance(ii, jj, spec, params), bounds), dtype=np.float64)
    return ii, _coefficients_from_h(h, params)


# ------------------------------------------------------------ kernel sweep

@dataclass
class KernelReport:
    measure: Measure
    projection: Projection
    nodes_total: int = 0
    nodes_projected: dict = field(default_factory=lambda: {"xi": 0, "xihat": 0})
    max_residual: float = 0.0        # moment identities at unprojected nodes
    max_cross_residual: float = 0.0  # E[dPhi dPsi] against dt^2 mu_phi mu_psi
    max_martingale_residual: float = 0.0
    projected_mass: float = 0.0      # P_n-mass of paths visiting a projected node

    @property
    def any_projected(self) -> bool:
        return any(self.nodes_projected.values())


def kernel_sweep(spec: LatticeSpec, params: HestonParams, bounds: TruncationBounds,
                 measure: Measure = Measure.PHYSICAL, projection: Projection = Projection.PS1,
                 upsilon: DriftFunctional | None = None) -> KernelReport:
    """Visit every node, check the moment identities where the raw kernel was
    published unchanged, and track the mass that reaches projected nodes."""
    measure = Measure(measure)
    rep = KernelReport(measure, Projection(projection))
    a, dt = spec.step, spec.dt
    ups = upsilon or DriftFunctional.zero()
    free = np.ones((1, 1))  # mass that has not met a projected node yet
    for k in range(spec.n):
        px, py, bx, by = step_kernels(k, spec, params, bounds, measure, projection, upsilon)
        ii, (mu_phi, sigma_phi, mu_psi, sigma_psi) = _node_coefficients(k, spec, params, bounds)
        rep.nodes_total += px.shape[0] * px.shape[1]
        rep.nodes_projected["xi"] += int(bx.sum())
        rep.nodes_projected["xihat"] += int(by.sum())

        mean_x = a * (px[..., 2] - px[..., 0])
        mean_y = a * (py[..., 2] - py[..., 0])
        res = [np.abs(a * a * (px[..., 2] + px[..., 0]) - dt * sigma_phi**2)[~bx],
               np.abs(a * a * (py[..., 2] + py[..., 0]) - dt * sigma_psi**2)[~by]]
        if measure is Measure.PHYSICAL:
            drift_psi = mu_psi
            res.append(np.abs(mean_x - dt * mu_phi)[~bx])
            both = ~(bx | by)
            cross = mean_x * mean_y - dt * dt * mu_phi * mu_psi
            rep.max_cross_residual = max(rep.max_cross_residual,
                                         float(np.abs(cross[both]).max(initial=0.0)))
        else:
            drift_psi = ups(k, ii) * sigma_psi + mu_psi
            mart = px[..., 2] * spec.exp_up + px[..., 1] + px[..., 0] * spec.exp_down - 1.0
            rep.max_martingale_residual = max(rep.max_martingale_residual,
                                              float(np.abs(mart).max()))
        res.append(np.abs(mean_y - dt * drift_psi)[~by])
        rep.max_residual = max([rep.max_residual] + [float(r.max(initial=0.0)) for r in res])

        hit = bx | by
        rep.projected_mass += float(free[hit].sum())
        free = np.where(hit, 0.0, free)
        nxt = np.zeros((2 * k + 3, 2 * k + 3))
        size = 2 * k + 1
        for x in range(3):
            for y in range(3):
                nxt[x:x + size, y:y + size] += free * px[..., x] * py[..., y]
        free = nxt
    rep.projected_mass = min(rep.projected_mass, 1.0)
    return rep


def q_price_martingale(spec: LatticeSpec, params: HestonParams, bounds: TruncationBounds,
                       upsilon: DriftFunctional | None = None,
                       projection: Projection = Projection.PS1) -> float:
    """Largest ``|E_Q[S_{k+1} / S_k] - 1|`` over all nodes."""
    worst = 0.0
    for k in range(spec.n):
        px, _, _, _ = step_kernels(k, spec, params, bounds, Measure.MARTINGALE, projection, upsilon)
        r = px[..., 2] * spec.exp_up + px[..., 1] + px[..., 0] * spec.exp_down - 1.0
        worst = max(worst, float(np.abs(r).max()))
    return worst


class AbsoluteContinuityError(ValueError):
    def __init__(self, node, move):
        super().__init__(f"martingale kernel gives zero weight to move {move} at node {node} "
                         "where the physical kernel does not")
        self.node = node
        self.move = move


def density_moment(spec: LatticeSpec, params: HestonParams, bounds: TruncationBounds,
                   upsilon: DriftFunctional | None = None, q: float = 2.0,
                   projection: Projection = Projection.PS1) -> float:
    """``E_Q[(dP_n/dQ_n)^q]`` by backward induction over the lattice.

    The likelihood ratio factorises over steps, so
    ``W_k = sum_moves Q (P/Q)^q W_{k+1}`` and the answer is ``W_0`` at the root.
    Overflow is reported as ``inf``.
    """
    W = np.ones((2 * spec.n + 1, 2 * spec.n + 1))
    for k in range(spec.n - 1, -1, -1):
        px, py, _, _ = step_kernels(k, spec, params, bounds, Measure.PHYSICAL, projection)
        qx, qy, _, _ = step_kernels(k, spec, params, bounds, Measure.MARTINGALE, projection,
                                    upsilon)
        size = 2 * k + 1
        out = np.zeros((size, size))
        for x in range(3):
            for y in range(3):
                P = px[..., x] * py[..., y]
                Q = qx[..., x] * qy[..., y]
                bad = (Q == 0.0) & (P > 0.0)
                if bad.any():
                    a, b = np.argwhere(bad)[0]
                    raise AbsoluteContinuityError((k, int(a) - k, int(b) - k), (x - 1, y - 1))
                with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
                    term = np.where(Q > 0.0, Q * (P / np.where(Q > 0.0, Q, 1.0)) ** q, 0.0)
                    # a null move contributes nothing even if the successor overflowed
                    out += np.where(term > 0.0, term * W[x:x + size, y:y + size], 0.0)
        W = out
    return float(W[0, 0])


# ---------------------------------------------------------------- jumps

@dataclass(frozen=True)
class JumpBound:
    a_n: float
    realized: np.ndarray  # per-path max |S_{k+1}/S_k - 1|

    @property
    def holds(self) -> bool:
        return bool(np.all(self.realized <= self.a_n * (1 + 1e-12)))


def jump_bound(spec: LatticeSpec) -> float:
    return math.expm1(spec.step)


def sample_lattice_paths(spec: LatticeSpec, params: HestonParams, bounds: TruncationBounds,
                         paths: int, seed: int = 0, projection: Projection = Projection.PS1):
    """Draw ``(paths, n)`` arrays of xi and xi-hat moves under the physical kernel."""
    gen = np.random.Generator(np.random.Philox(key=np.array([seed, 0], dtype=np.uint64)))
    i = np.zeros(paths, dtype=np.int64)
    j = np.zeros(paths, dtype=np.int64)
    xi = np.zeros((paths, spec.n), dtype=np.int8)
    xihat = np.zeros((paths, spec.n), dtype=np.int8)
    for k in range(spec.n):
        px, py, _, _ = step_kernels(k, spec, params, bounds, Measure.PHYSICAL, projection)
        u = gen.random((paths, 2))
        cx = np.cumsum(px[i + k, j + k], axis=1)
        cy = np.cumsum(py[i + k, j + k], axis=1)
        mx = (u[:, :1] >= cx[:, :2]).sum(axis=1) - 1
        my = (u[:, 1:] >= cy[:, :2]).sum(axis=1) - 1
        xi[:, k] = mx
        xihat[:, k] = my
        i += mx
        j += my
    return xi, xihat


def jump_bound_check(spec: LatticeSpec, params: HestonParams, bounds: TruncationBounds,
                     paths: int = 1000, seed: int = 0,
                     projection: Projection = Projection.PS1) -> JumpBound:
    xi, _ = sample_lattice_paths(spec, params, bounds, paths, seed, projection)
    return JumpBound(jump_bound(spec), realized_max_jump(xi, spec.step))


def realized_max_jump(xi: np.ndarray, step: float) -> np.ndarray:
    """Largest relative price move along each path of moves ``xi``."""
    xi = np.atleast_2d(xi)
    rel = np.abs(np.expm1(xi * step))
    return rel.max(axis=1, initial=0.0)


# ---------------------------------------------------------- distributions

def terminal_pmf(spec: LatticeSpec, params: HestonParams, bounds: TruncationBounds,
                 measure: Measure = Measure.PHYSICAL, projection: Projection = Projection.PS1,
                 upsilon: DriftFunctional | None = None) -> np.ndarray:
    """Law of the price index ``i`` at maturity, indexed ``i + n``."""
    return forward_distribution(spec, params, bounds, measure, projection, upsilon).sum(axis=1)


def ks_distance(pmf, samples, prices) -> float:
    """Kolmogorov-Smirnov distance between a discrete law on ``prices`` and
    the empirical law of ``samples``."""
    pmf = np.asarray(pmf, dtype=np.float64)
    prices = np.asarray(prices, dtype=np.float64)
    samples = np.sort(np.asarray(samples, dtype=np.float64))
    if pmf.size == 0 or samples.size == 0:
        raise ValueError("ks_distance needs a non-empty pmf and sample")
    order = np.argsort(prices)
    prices, cdf = prices[order], np.cumsum(pmf[order])
    pts = np.union1d(prices, samples)
    m = samples.size
    emp_right = np.searchsorted(samples, pts, side="right") / m
    emp_left = np.searchsorted(samples, pts, side="left") / m
    pos_right = np.searchsorted(prices, pts, side="right")
    pos_left = np.searchsorted(prices, pts, side="left")
    lat = np.concatenate([[0.0], cdf])
    lat_right = lat[pos_right]
    lat_left = lat[pos_left]
    return float(max(np.abs(emp_right - lat_right).max(), np.abs(emp_left - lat_left).max()))
