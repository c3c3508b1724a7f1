"""Small constructive examples about weak convergence of discrete markets.

* Sign paths: a random walk and the walk of its running sign products have
  vanishing covariation, so they converge to independent Brownian motions.
* A complete binomial model built from those walks converges to a Hull-White
  type stochastic volatility model, yet binomial call prices stay strictly
  below the limit super-replication cost.
* A non-concave utility where the binomial value is 3/2 while the limit
  (constant price) value is 1.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy import stats

from .mc import McEstimate, estimate


def _signs(gen: np.random.Generator, shape) -> np.ndarray:
    return np.where(gen.random(shape) < 0.5, -1, 1).astype(np.int8)


def _rng(seed: int, stream: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=np.array([seed, stream], dtype=np.uint64)))


# ---------------------------------------------------------------- sign paths

@dataclass(frozen=True)
class SignPathPair:
    n: int
    maturity: float
    w: np.ndarray          # W at k = 0..n
    w_hat: np.ndarray      # W-hat at k = 0..n
    covariation: np.ndarray  # [W, W-hat] at k = 0..n


def sign_path_pair(n: int, seed: int = 0, maturity: float = 1.0,
                   signs: np.ndarray | None = None) -> SignPathPair:
    """Build one path of the walk and the sign-product walk."""
    if n < 1:
        raise ValueError("n must be >= 1")
    xi = _signs(_rng(seed), n) if signs is None else np.asarray(signs, dtype=np.int8)
    if xi.shape != (n,) or not np.all(np.abs(xi) == 1):
        raise ValueError("signs must be a length-n vector of +-1")
    scale = math.sqrt(maturity / n)
    prods = np.cumprod(xi.astype(np.int64))
    prev = np.concatenate([[1], prods[:-1]])  # product over j < i
    zero = np.zeros(1)
    return SignPathPair(
        n, maturity,
        np.concatenate([zero, scale * np.cumsum(xi)]),
        np.concatenate([zero, scale * np.cumsum(prods)]),
        np.concatenate([zero, (maturity / n) * np.cumsum(prev)]),
    )


def _terminal_pairs(n: int, paths: int, seed: int, maturity: float, chunk: int = 1 << 14):
    """Terminal (W, W-hat, covariation) for many paths, chunked over paths."""
    gen = _rng(seed)
    scale = math.sqrt(maturity / n)
    out = np.empty((paths, 3))
    for start in range(0, paths, chunk):
        m = min(chunk, paths - start)
        xi = _signs(gen, (m, n)).astype(np.int64)
        prods = np.cumprod(xi, axis=1)
        out[start:start + m, 0] = scale * xi.sum(axis=1)
        out[start:start + m, 1] = scale * prods.sum(axis=1)
        # sum_{i=1}^n prod_{j<i} = 1 + sum_{i=1}^{n-1} prod_{j<=i}
        out[start:start + m, 2] = (maturity / n) * (1 + prods[:, :-1].sum(axis=1))
    return out


@dataclass(frozen=True)
class CovariationResult:
    n: int
    second_moment: McEstimate  # E[([W, W-hat]_T)^2]
    target: float              # T^2 / n
    correlation: float         # sample corr(W_T, W-hat_T)
    correlation_stderr: float


def kais_covariation(n: int, paths: int = 100_000, seed: int = 0,
                     maturity: float = 1.0) -> CovariationResult:
    if n < 1:
        raise ValueError("n must be >= 1")
    vals = _terminal_pairs(n, paths, seed, maturity)
    est = estimate(vals[:, 2] ** 2, seed)
    corr = float(np.corrcoef(vals[:, 0], vals[:, 1])[0, 1]) if paths > 2 else 0.0
    return CovariationResult(n, est, maturity**2 / n, corr, 1.0 / math.sqrt(paths))


# ---------------------------------------------------------------- Hull-White

def _check_hullwhite(n: int, maturity: float) -> None:
    step = math.sqrt(maturity / n)
    if not (step < 1.0 and math.log(n) > 0.0 and math.log(n) * step < 1.0):
        raise ValueError(f"n={n} too small for a positive binomial price (need "
                         "sqrt(T/n) < 1 and ln(n) sqrt(T/n) < 1)")


def hullwhite_terminal(xi: np.ndarray, maturity: float = 1.0) -> np.ndarray:
    """Terminal binomial price for each row of signs ``xi`` (paths, n)."""
    xi = np.atleast_2d(xi).astype(np.float64)
    n = xi.shape[1]
    _check_hullwhite(n, maturity)
    step = math.sqrt(maturity / n)
    cap = math.log(n)
    nu = np.ones(xi.shape[0])
    s = np.ones(xi.shape[0])
    prod = np.ones(xi.shape[0])
    for i in range(n):
        prod = prod * xi[:, i]
        s = s * (1.0 + np.minimum(nu, cap) * step * prod)
        nu = nu * (1.0 + step * xi[:, i])
    return s


def hullwhite_enumerate(n: int, maturity: float = 1.0) -> float:
    """``E[S_T]`` over all ``2^n`` equally likely sign paths."""
    if n > 20:
        raise ValueError("enumeration limited to n <= 20")
    xi = np.array(list(itertools.product((-1, 1), repeat=n)), dtype=np.float64)
    return math.fsum(hullwhite_terminal(xi, maturity)) / 2**n


def hullwhite_mean(n: int, maturity: float = 1.0) -> float:
    """``E[S_T]`` for any ``n`` by a recombining recursion.

    The volatility factor only depends on the number of up-moves so far and
    the price factor on the running sign product, so carrying
    ``E[S_k ; ups, sign]`` over ``O(n^2)`` states is exact.
    """
    _check_hullwhite(n, maturity)
    step = math.sqrt(maturity / n)
    cap = math.log(n)
    # mass[u, s]: E[S_k 1{u ups, sign product s}], s index 0 -> -1, 1 -> +1
    mass = np.zeros((n + 1, 2))
    mass[0, 1] = 1.0
    for k in range(n):
        nu = (1.0 + step) ** np.arange(k + 1) * (1.0 - step) ** (k - np.arange(k + 1))
        vol = np.minimum(nu, cap) * step
        nxt = np.zeros_like(mass)
        for s_idx, sign in ((0, -1.0), (1, 1.0)):
            m = mass[:k + 1, s_idx]
            for move, shift in ((1.0, 1), (-1.0, 0)):
                new_sign = sign * move
                nxt[shift:shift + k + 1, int(new_sign > 0)] += 0.5 * m * (1.0 + vol * new_sign)
        mass = nxt
    return math.fsum(mass.ravel())


def hullwhite_sde_sample(paths: int, seed: int = 0, maturity: float = 1.0,
                         dt: float = 1e-3) -> np.ndarray:
    """Terminal S of ``dS = nu S dB``, ``dnu = nu dW`` (independent B, W), S0 = nu0 = 1.

    The volatility is sampled exactly; S by log-Euler.
    """
    gen = _rng(seed, 1)
    steps = max(1, math.ceil(maturity / dt - 1e-9))
    h = maturity / steps
    sq = math.sqrt(h)
    log_s = np.zeros(paths)
    w = np.zeros(paths)
    t = 0.0
    for _ in range(steps):
        nu = np.exp(w - 0.5 * t)
        z = gen.standard_normal((2, paths))
        log_s += -0.5 * nu * nu * h + nu * sq * z[0]
        w += sq * z[1]
        t += h
    return np.exp(log_s)


@dataclass(frozen=True)
class HullWhiteResult:
    n: int
    mean_terminal: McEstimate
    call_price: McEstimate
    ks_vs_sde: float | None
    strike: float
    exact_mean: float  # E[S_T] from the recombining recursion

    @property
    def gap(self) -> float:
        """Limit super-replication cost (S0 = 1) minus the binomial call price."""
        return 1.0 - self.call_price.mean


def hullwhite_demo(n: int, paths: int = 100_000, seed: int = 0, strike: float = 1.0,
                   maturity: float = 1.0, sde_sample: np.ndarray | None = None,
                   chunk: int = 1 << 14) -> HullWhiteResult:
    _check_hullwhite(n, maturity)
    gen = _rng(seed)
    terminal = np.empty(paths)
    for start in range(0, paths, chunk):
        m = min(chunk, paths - start)
        terminal[start:start + m] = hullwhite_terminal(_signs(gen, (m, n)), maturity)
    ks = None
    if sde_sample is not None:
        ks = float(stats.ks_2samp(terminal, sde_sample).statistic)
    # S_T is heavy-tailed; with E[S_T] = 1 the call equals 1 - E[min(S_T, K)],
    # whose integrand is bounded
    capped = estimate(np.minimum(terminal, strike), seed)
    call = McEstimate(1.0 - capped.mean, capped.stderr, capped.paths, seed)
    return HullWhiteResult(n, estimate(terminal, seed), call, ks, strike,
                           hullwhite_mean(n, maturity))


# ---------------------------------------------------------- non-concave utility

@dataclass(frozen=True)
class NonConcaveResult:
    value: Fraction
    limit_value: Fraction
    min_wealth: Fraction
    n: int


def nonconcave_utility(v) -> Fraction:
    return min(Fraction(2), max(Fraction(v), Fraction(1)))


def nonconcave_value(n: int = 4) -> NonConcaveResult:
    """Replicate ``2 * 1{xi_1 = 1}`` from capital 1 in the binomial model with
    moves ``1 +- 1/n^2`` and return the expected utility of the terminal wealth.

    Exact rational arithmetic over the full tree of ``2^n`` paths; checks that
    the hedge is self-financing and the wealth never goes negative.
    """
    if not 1 <= n <= 16:
        raise ValueError("n must be in 1..16")
    eps = Fraction(1, n * n)

    def payoff(signs):
        return Fraction(2) if signs[0] == 1 else Fraction(0)

    # backward induction for the replicating value (symmetric moves: q = 1/2)
    values = {}
    for path in itertools.product((-1, 1), repeat=n):
        values[path] = payoff(path)
    for k in range(n - 1, -1, -1):
        for path in itertools.product((-1, 1), repeat=k):
            values[path] = (values[path + (-1,)] + values[path + (1,)]) / 2
    x = values[()]
    if x != 1:
        raise AssertionError(f"replication cost {x} != 1")

    # forward pass: hedge ratios and wealth along every path
    min_wealth = x
    total = Fraction(0)
    for path in itertools.product((-1, 1), repeat=n):
        wealth = x
        price = Fraction(1)
        for k in range(n):
            prefix = path[:k]
            delta = (values[prefix + (1,)] - values[prefix + (-1,)]) / (2 * eps * price)
            nxt = price * (1 + path[k] * eps)
            wealth = wealth + delta * (nxt - price)
            price = nxt
            if wealth != values[path[:k + 1]]:
                raise AssertionError("hedge is not self-financing")
            min_wealth = min(min_wealth, wealth)
        total += nonconcave_utility(wealth)
    value = total / 2**n
    # the limit price is constant, so wealth stays at x and the value is U(x)
    return NonConcaveResult(value, nonconcave_utility(x), min_wealth, n)
