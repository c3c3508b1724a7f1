"""Exact continuous-control recursion for small lattices.

Every value function ``lambda -> J_k(i, j, lambda)`` is concave, non-decreasing
and piecewise linear on [0, 1] with ``J(1) = 0``.  Writing ``u = c e^-a`` and
``v = Lambda(1)``, the self-financing constraint reads
``u + v = lambda (1 + e^-a)``, so the optimisation over the control is a
sup-convolution of two concave functions.  For piecewise-linear concave
functions that is a merge of their segments by decreasing slope.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import HestonParams, LatticeSpec, Measure, Projection, TruncationBounds, step_kernels

MAX_EXACT_N = 8


@dataclass(frozen=True)
class PwlConcave:
    """Piecewise-linear function on [0, 1], extended by 0 for ``lambda >= 1``."""

    breakpoints: np.ndarray
    values: np.ndarray

    def __call__(self, lam):
        lam = np.asarray(lam, dtype=np.float64)
        out = np.interp(np.minimum(lam, 1.0), self.breakpoints, self.values)
        return float(out) if out.ndim == 0 else out

    def __len__(self):
        return len(self.breakpoints)

    def slopes(self) -> np.ndarray:
        return np.diff(self.values) / np.diff(self.breakpoints)

    def is_concave(self, tol: float = 1e-10) -> bool:
        return bool(np.all(np.diff(self.slopes()) <= tol))

    def is_nondecreasing(self, tol: float = 1e-12) -> bool:
        return bool(np.all(np.diff(self.values) >= -tol))


def _simplify(x: np.ndarray, y: np.ndarray, tol: float = 1e-13) -> PwlConcave:
    """Drop duplicate abscissae and collinear interior points."""
    keep = np.concatenate([[True], np.diff(x) > tol])
    x, y = x[keep], y[keep]
    if len(x) > 2:
        s = np.diff(y) / np.diff(x)
        bend = np.abs(np.diff(s)) > tol * np.maximum(1.0, np.abs(s[:-1]))
        mask = np.concatenate([[True], bend, [True]])
        x, y = x[mask], y[mask]
    return PwlConcave(x, y)


def terminal_pwl(price: float, strike: float) -> PwlConcave:
    """``lambda -> U(lambda * price, price)``: zero once wealth covers the payoff."""
    payoff = max(price - strike, 0.0)
    kink = payoff / price
    if kink <= 0.0:
        return PwlConcave(np.array([0.0, 1.0]), np.array([0.0, 0.0]))
    xs = np.array([0.0, kink, 1.0])
    return _simplify(xs, np.array([-payoff, 0.0, 0.0]))


def combine(weights, funcs) -> PwlConcave:
    """Non-negative combination of PWL functions on [0, 1]."""
    xs = np.unique(np.concatenate([f.breakpoints for f in funcs]))
    ys = np.zeros_like(xs)
    for w, f in zip(weights, funcs):
        if w != 0.0:
            ys = ys + w * f(xs)
    return _simplify(xs, ys)


def _segments(x: np.ndarray, y: np.ndarray):
    dx = np.diff(x)
    return dx, np.diff(y) / dx


def sup_convolution_step(g_down: PwlConcave, g_mid: PwlConcave, g_up: PwlConcave,
                         p_down: float, p_mid: float, p_up: float, a: float) -> PwlConcave:
    """One backward step at a node given the expected successor values per
    price move.  Returns ``lambda -> max_c E[J_{k+1}]`` over the admissible
    controls ``c in [0, min(1, lambda (1 + e^a))]``."""
    e_down = math.exp(-a)
    # f1(u) = p_down g_down(u e^a), u in [0, e^-a]
    dx1, s1 = _segments(g_down.breakpoints * e_down, p_down * g_down.values)
    # f2(v) = p_up g_up(v), v >= 0, flat beyond v = 1
    dx2, s2 = _segments(g_up.breakpoints, p_up * g_up.values)
    w_max = 1.0 + e_down
    dx = np.concatenate([dx1, dx2, [w_max]])
    sl = np.concatenate([s1, s2, [0.0]])
    order = np.argsort(-sl, kind="stable")
    w = np.concatenate([[0.0], np.cumsum(dx[order])])
    h = p_down * g_down.values[0] + p_up * g_up.values[0] + np.concatenate(
        [[0.0], np.cumsum(dx[order] * sl[order])])
    # pin the flat tail exactly at the zero level reached at w = 1 + e^-a
    lam_h = w / w_max
    inside = lam_h < 1.0
    lam_pts = np.unique(np.clip(np.concatenate([lam_h[inside], g_mid.breakpoints]), 0.0, 1.0))
    # points within rounding of 1 would shadow the pinned endpoint in _simplify
    lam_pts = np.append(lam_pts[lam_pts < 1.0 - 1e-13], 1.0)
    vals = np.interp(lam_pts * w_max, w, h) + p_mid * g_mid(lam_pts)
    vals[-1] = 0.0
    return _simplify(lam_pts, vals)


def dp_exact_pwl(spec: LatticeSpec, params: HestonParams, bounds: TruncationBounds,
                 projection: Projection = Projection.PS1, max_breakpoints: int = 200_000,
                 return_all: bool = False):
    """Exact value function at the root node (or every node at k=0..n with
    ``return_all``)."""
    n = spec.n
    if n > MAX_EXACT_N:
        raise ValueError(f"exact recursion limited to n <= {MAX_EXACT_N}, got {n}")
    prices = params.s0 * np.exp(np.arange(-n, n + 1) * spec.step)
    layer = {}
    term = [terminal_pwl(float(s), params.strike) for s in prices]
    for i in range(-n, n + 1):
        for j in range(-n, n + 1):
            layer[(i, j)] = term[i + n]
    history = {n: layer}
    for k in range(n - 1, -1, -1):
        px, py, _, _ = step_kernels(k, spec, params, bounds, Measure.PHYSICAL, projection)
        new = {}
        total = 0
        for i in range(-k, k + 1):
            for j in range(-k, k + 1):
                qx = px[i + k, j + k]
                qy = py[i + k, j + k]
                g = [combine(qy, [layer[(i + x, j + y)] for y in (-1, 0, 1)]) for x in (-1, 0, 1)]
                f = sup_convolution_step(g[0], g[1], g[2], qx[0], qx[1], qx[2], spec.step)
                new[(i, j)] = f
                total += len(f)
        if total > max_breakpoints:
            raise RuntimeError(f"breakpoint budget exceeded at k={k}: {total} > {max_breakpoints}")
        layer = new
        history[k] = layer
    return history if return_all else layer[(0, 0)]

