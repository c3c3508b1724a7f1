import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import TOY_BOUNDS, TOY_PARAMS, TOY_SIGMA_TILDE
from shortfall_lattice.dp import Bound, dp_grid
from shortfall_lattice.exact import (
    PwlConcave,
    combine,
    dp_exact_pwl,
    sup_convolution_step,
    terminal_pwl,
)
from shortfall_lattice.model import LatticeSpec


@st.composite
def concave_zero_at_one(draw):
    """Concave, non-decreasing PWL function on [0, 1] with value 0 at 1."""
    k = draw(st.integers(1, 5))
    cuts = sorted(set(draw(st.lists(st.floats(0.02, 0.98), min_size=k - 1, max_size=k - 1))))
    xs = np.array([0.0] + cuts + [1.0])
    slopes = np.sort(np.array(draw(st.lists(st.floats(0.0, 20.0), min_size=len(xs) - 1,
                                            max_size=len(xs) - 1))))[::-1]
    ys = np.concatenate([[0.0], np.cumsum(slopes * np.diff(xs))])
    return PwlConcave(xs, ys - ys[-1])


def brute_step(gd, gm, gu, pd, pm, pu, a, lam, grid=4001):
    cmax = min(1.0, lam * (1 + math.exp(a)))
    c = np.linspace(0.0, cmax, grid)
    up = np.clip(lam * (1 + math.exp(-a)) - c * math.exp(-a), 0.0, 1.0)
    return float(np.max(pd * gd(c) + pm * gm(lam) + pu * gu(up)))


@given(concave_zero_at_one(), concave_zero_at_one(), concave_zero_at_one(),
       st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.floats(0.05, 0.8))
def test_sup_convolution_matches_brute_force(gd, gm, gu, w1, w2, a):
    pd, pu = w1 / 2, w2 / 2
    pm = 1.0 - pd - pu
    f = sup_convolution_step(gd, gm, gu, pd, pm, pu, a)
    lip = 20.0 * (1 + math.exp(a)) * 2
    for lam in np.linspace(0, 1, 23):
        brute = brute_step(gd, gm, gu, pd, pm, pu, a, lam)
        assert f(lam) >= brute - 1e-10
        assert f(lam) <= brute + lip / 4000 + 1e-10
    assert f(1.0) == 0.0
    assert f.is_concave(1e-8)
    assert f.is_nondecreasing(1e-10)


def test_terminal_pwl():
    f = terminal_pwl(100.0, 90.0)
    np.testing.assert_allclose(f.breakpoints, [0.0, 0.1, 1.0])
    np.testing.assert_allclose(f.values, [-10.0, 0.0, 0.0])
    assert f(0.05) == pytest.approx(-5.0)
    assert f(1.5) == 0.0
    out = terminal_pwl(80.0, 90.0)
    assert out(0.0) == 0.0 and len(out) == 2


def test_combine():
    f = terminal_pwl(100.0, 90.0)
    g = terminal_pwl(200.0, 90.0)
    h = combine([0.25, 0.75], [f, g])
    for lam in (0.0, 0.05, 0.3, 0.7, 1.0):
        assert h(lam) == pytest.approx(0.25 * f(lam) + 0.75 * g(lam))


def test_n0_is_terminal(params, bounds):
    spec = LatticeSpec.build(0, 5.0, params, bounds)
    f = dp_exact_pwl(spec, params, bounds)
    np.testing.assert_allclose(f.breakpoints, [0.0, 0.1, 1.0])
    np.testing.assert_allclose(f.values, [-10.0, 0.0, 0.0])


@pytest.mark.parametrize("n", [1, 2, 3, 4])
@pytest.mark.parametrize("which", ["ref", "toy"])
def test_exact_is_sandwiched_by_grid_programs(n, which, params, bounds):
    p, b, st_ = (params, bounds, 5.0) if which == "ref" else (TOY_PARAMS, TOY_BOUNDS,
                                                               TOY_SIGMA_TILDE)
    spec = LatticeSpec.build(n, st_, p, b)
    f = dp_exact_pwl(spec, p, b)
    assert f.is_concave(1e-8) and f.is_nondecreasing(1e-10)
    assert f(1.0) == 0.0
    prev = None
    for M in (10, 40, 160):
        lam = np.arange(M + 1) / M
        lo = dp_grid(spec, p, b, M, Bound.MINUS).root()
        hi = dp_grid(spec, p, b, M, Bound.PLUS).root()
        ex = f(lam)
        assert np.all(lo <= ex + 1e-10)
        assert np.all(ex <= hi + 1e-10)
        width = float(np.max(hi - lo))
        if prev is not None:
            assert width <= prev + 1e-12
        prev = width


def test_return_all_levels(params, bounds):
    spec = LatticeSpec.build(2, 5.0, params, bounds)
    hist = dp_exact_pwl(spec, params, bounds, return_all=True)
    assert set(hist) == {0, 1, 2}
    assert len(hist[1]) == 9 and len(hist[0]) == 1


def test_limits(params, bounds):
    with pytest.raises(ValueError):
        dp_exact_pwl(LatticeSpec.build(9, 5.0, params, bounds), params, bounds)
    with pytest.raises(RuntimeError):
        dp_exact_pwl(LatticeSpec.build(3, 5.0, params, bounds), params, bounds,
                     max_breakpoints=5)
