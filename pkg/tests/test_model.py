import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import TOY_BOUNDS, TOY_PARAMS, TOY_SIGMA_TILDE, instances
from shortfall_lattice.model import (
    DriftFunctional,
    HestonParams,
    KernelError,
    LatticeSpec,
    Measure,
    NodeState,
    Projection,
    TruncationBounds,
    clamp_variance,
    martingale_kernel,
    min_valid_n,
    node_values,
    physical_kernel,
    project,
    raw_kernels,
    step_kernels,
    transform_coeffs,
)

# Frozen from a 40-digit mpmath evaluation of the closed-form coefficients and
# kernels at the root of the reference lattice (n = 400, sigma_tilde = 5).
ORACLE = {
    "mu_phi": 0.005,
    "sigma_phi": 0.3,
    "mu_psi": 0.76396923076923076923,
    "sigma_psi": 0.23051247254758255271,
    "p_xi": (0.001825, 0.9964, 0.001775),
    "p_xihat_raw": (0.0048825661538461538, 0.99787456, -0.0027571261538461538),
    "p_xihat_ps1": (0.0048825661538461538, 0.99511743384615384615, 0.0),
    "q_xi": (0.0015761645968111268, 0.9964, 0.0020238354031888732),
    "price_1_1_0": 128.40254166877414841,
}


def test_clamp_examples(bounds):
    assert clamp_variance(0.09, bounds) == 0.09
    assert clamp_variance(-3.0, bounds) == pytest.approx(1e-8, rel=1e-12)
    assert clamp_variance(7.0, bounds) == 1.0
    arr = clamp_variance(np.array([-1.0, 0.5, 2.0]), bounds)
    np.testing.assert_allclose(arr, [1e-8, 0.5, 1.0])


@given(st.floats(-10, 10), st.floats(-10, 10))
def test_clamp_monotone_and_lipschitz(z1, z2):
    b = TruncationBounds(0.1, 0.9)
    h1, h2 = clamp_variance(z1, b), clamp_variance(z2, b)
    assert abs(h1 - h2) <= abs(z1 - z2) + 1e-15
    if z1 <= z2:
        assert h1 <= h2
    assert 0.01 - 1e-15 <= h1 <= 0.81 + 1e-15


def test_root_coefficients_match_oracle(params, bounds, spec400):
    c = transform_coeffs(spec400.phi0, spec400.psi0, params, bounds)
    assert c.mu_phi == pytest.approx(ORACLE["mu_phi"], rel=1e-14)
    assert c.sigma_phi == pytest.approx(ORACLE["sigma_phi"], rel=1e-14)
    assert c.mu_psi == pytest.approx(ORACLE["mu_psi"], rel=1e-13)
    assert c.sigma_psi == pytest.approx(ORACLE["sigma_psi"], rel=1e-14)


def test_root_physical_kernel_matches_oracle(params, bounds, spec400):
    ker = physical_kernel(NodeState(0, 0, 0), spec400, params, bounds)
    np.testing.assert_allclose(ker.p_xi, ORACLE["p_xi"], rtol=1e-12)
    np.testing.assert_allclose(ker.raw_xihat, ORACLE["p_xihat_raw"], rtol=1e-12)
    np.testing.assert_allclose(ker.p_xihat, ORACLE["p_xihat_ps1"], rtol=1e-12, atol=0)
    assert ker.projected == (False, True)


def test_root_martingale_kernel_matches_oracle(params, bounds, spec400):
    ker = martingale_kernel(NodeState(0, 0, 0), spec400, params, bounds)
    np.testing.assert_allclose(ker.p_xi, ORACLE["q_xi"], rtol=1e-12)
    up, mid, down = ker.p_xi
    assert up * spec400.exp_up + mid + down * spec400.exp_down == pytest.approx(1.0, abs=1e-15)


def test_node_values(params, bounds, spec400):
    _, _, _, price = node_values(NodeState(1, 1, 0), spec400, params)
    assert price == pytest.approx(ORACLE["price_1_1_0"], rel=1e-14)
    phi, psi, nu, price = node_values(NodeState(0, 0, 0), spec400, params)
    assert phi == pytest.approx(math.log(100.0))
    assert nu == pytest.approx(0.09, abs=1e-16)
    assert price == 100.0
    # raw variance can go negative off the root; the clamp handles it
    assert node_values(NodeState(1, 0, -1), spec400, params)[2] == pytest.approx(-0.0075)
    with pytest.raises(ValueError):
        node_values(NodeState(401, 0, 0), spec400, params)


def test_node_state_validation():
    with pytest.raises(ValueError):
        NodeState(1, 2, 0)
    with pytest.raises(ValueError):
        NodeState(-1, 0, 0)


def test_projection_schemes():
    raw = np.array([[-0.1, 0.9, 0.2]])  # (down, mid, up)
    ps1, m1 = project(raw, Projection.PS1)
    np.testing.assert_allclose(ps1, [[0.0, 0.8, 0.2]])
    ps2, _ = project(raw, Projection.PS2)
    # variance term 0.1 kept, drift clipped to +-0.05
    np.testing.assert_allclose(ps2, [[0.0, 0.9, 0.1]], atol=1e-15)
    ps3, _ = project(raw, Projection.PS3)
    np.testing.assert_allclose(ps3, [[0.0, 0.9 / 1.1, 0.2 / 1.1]])
    assert m1.tolist() == [True]
    with pytest.raises(KernelError):
        project(raw, Projection.NONE)


def test_ps1_renormalises_when_middle_negative():
    out, _ = project(np.array([[0.7, -0.5, 0.8]]), Projection.PS1)
    np.testing.assert_allclose(out, [[0.7 / 1.5, 0.0, 0.8 / 1.5]])


def test_valid_triples_untouched():
    raw = np.array([[0.1, 0.7, 0.2], [0.0, 1.0, 0.0]])
    for scheme in Projection:
        out, mask = project(raw, scheme)
        assert np.array_equal(out, raw)
        assert not mask.any()


@given(st.lists(st.floats(-2, 2), min_size=3, max_size=3),
       st.sampled_from([Projection.PS1, Projection.PS3]))
def test_projection_produces_distribution(vals, scheme):
    raw = np.array([vals[0], 1.0 - vals[0] - vals[2], vals[2]])
    if np.all(raw <= 0):
        return
    out, _ = project(raw[None, :], scheme)
    assert np.all(out >= 0) and np.all(out <= 1)
    assert out.sum() == pytest.approx(1.0, abs=1e-12)


def test_no_projection_raises_on_reference_instance(params, bounds, spec400):
    with pytest.raises(KernelError) as info:
        step_kernels(0, spec400, params, bounds, Measure.PHYSICAL, Projection.NONE)
    assert info.value.node == (0, 0, 0)


@given(instances(), st.integers(1, 60), st.sampled_from(list(Measure)))
def test_raw_kernels_sum_to_one(inst, n, measure):
    p, b, st_ = inst
    spec = LatticeSpec.build(n, st_, p, b)
    k = min(n - 1, 3)
    idx = np.arange(-k, k + 1)
    ii, jj = np.meshgrid(idx, idx, indexing="ij")
    xi, xihat = raw_kernels(k, ii, jj, spec, p, b, measure)
    np.testing.assert_allclose(xi.sum(-1), 1.0, atol=1e-14)
    np.testing.assert_allclose(xihat.sum(-1), 1.0, atol=1e-14)


@given(instances(), st.integers(1, 60), st.sampled_from(list(Projection)[1:]))
def test_published_kernels_are_distributions(inst, n, scheme):
    p, b, st_ = inst
    spec = LatticeSpec.build(n, st_, p, b)
    for measure in Measure:
        px, py, _, _ = step_kernels(min(n - 1, 2), spec, p, b, measure, scheme)
        for arr in (px, py):
            assert np.all(arr >= 0) and np.all(arr <= 1)
            np.testing.assert_allclose(arr.sum(-1), 1.0, atol=1e-12)


@given(instances(), st.integers(1, 60))
def test_moments_match_at_unprojected_nodes(inst, n):
    p, b, st_ = inst
    spec = LatticeSpec.build(n, st_, p, b)
    k = min(n - 1, 2)
    px, py, bx, by = step_kernels(k, spec, p, b, Measure.PHYSICAL, Projection.PS1)
    idx = np.arange(-k, k + 1)
    a, dt = spec.step, spec.dt
    for u, i in enumerate(idx):
        for v, j in enumerate(idx):
            c = transform_coeffs(spec.phi0 + i * a, spec.psi0 + j * a, p, b)
            if not bx[u, v]:
                assert a * (px[u, v, 2] - px[u, v, 0]) == pytest.approx(dt * c.mu_phi, abs=1e-13)
                assert a * a * (px[u, v, 2] + px[u, v, 0]) == pytest.approx(
                    dt * c.sigma_phi**2, rel=1e-12, abs=1e-15)
            if not by[u, v]:
                assert a * (py[u, v, 2] - py[u, v, 0]) == pytest.approx(dt * c.mu_psi, abs=1e-13)
                assert a * a * (py[u, v, 2] + py[u, v, 0]) == pytest.approx(
                    dt * c.sigma_psi**2, rel=1e-12, abs=1e-15)


@given(instances(), st.integers(1, 60))
def test_martingale_xi_never_projected_and_martingale(inst, n):
    p, b, st_ = inst
    spec = LatticeSpec.build(n, st_, p, b)
    k = min(n - 1, 3)
    px, _, bx, _ = step_kernels(k, spec, p, b, Measure.MARTINGALE, Projection.PS1)
    assert not bx.any()
    r = px[..., 2] * spec.exp_up + px[..., 1] + px[..., 0] * spec.exp_down
    np.testing.assert_allclose(r, 1.0, atol=1e-14)


def test_martingale_drift_shift():
    spec = LatticeSpec.build(20, TOY_SIGMA_TILDE, TOY_PARAMS, TOY_BOUNDS)
    k0 = martingale_kernel(NodeState(0, 0, 0), spec, TOY_PARAMS, TOY_BOUNDS)
    k1 = martingale_kernel(NodeState(0, 0, 0), spec, TOY_PARAMS, TOY_BOUNDS,
                           DriftFunctional.constant(0.1))
    c = transform_coeffs(spec.phi0, spec.psi0, TOY_PARAMS, TOY_BOUNDS)
    shift = (k1.p_xihat[0] - k1.p_xihat[2]) - (k0.p_xihat[0] - k0.p_xihat[2])
    assert spec.step * shift == pytest.approx(spec.dt * 0.1 * c.sigma_psi, rel=1e-12)
    assert k1.p_xi == k0.p_xi


def test_drift_functional_bound_enforced():
    f = DriftFunctional(lambda k, i: 2.0, 1.0)
    with pytest.raises(ValueError):
        f(0, np.arange(3))


def test_min_valid_n_reference_instance_is_unreachable(params, bounds):
    assert min_valid_n(params, bounds, 5.0) == math.inf


def _raw_valid_over_band(n, sigma_tilde, params, bounds):
    """Brute force: raw kernels at many variances across the clamp band."""
    spec = LatticeSpec.build(n, sigma_tilde, params, bounds)
    h = np.linspace(bounds.sigma_lo**2, bounds.sigma_hi**2, 401)
    j = (h - params.nu0) / (params.sigma * spec.step)  # node with raw variance h at i = 0
    ok = True
    for measure in Measure:
        for t in raw_kernels(0, np.zeros_like(j), j, spec, params, bounds, measure):
            ok &= bool(np.all((t >= -1e-15) & (t <= 1 + 1e-15)))
    return ok


def test_min_valid_n_toy():
    assert min_valid_n(TOY_PARAMS, TOY_BOUNDS, TOY_SIGMA_TILDE) == 1
    for n in (1, 2, 5, 40):
        assert _raw_valid_over_band(n, TOY_SIGMA_TILDE, TOY_PARAMS, TOY_BOUNDS)


@pytest.mark.parametrize("sigma_tilde,expected", [(1.0, 2), (2.0, 6), (3.0, 14)])
def test_min_valid_n_is_sharp(sigma_tilde, expected):
    n0 = min_valid_n(TOY_PARAMS, TOY_BOUNDS, sigma_tilde)
    assert n0 == expected
    assert not _raw_valid_over_band(n0 - 1, sigma_tilde, TOY_PARAMS, TOY_BOUNDS)
    assert _raw_valid_over_band(n0, sigma_tilde, TOY_PARAMS, TOY_BOUNDS)
    assert _raw_valid_over_band(n0 + 9, sigma_tilde, TOY_PARAMS, TOY_BOUNDS)


def test_min_valid_n_zero_drift_is_one():
    # mu = h/2 and theta = h, rho = 0 at the constant variance: all drifts vanish
    p = HestonParams(mu=0.02, kappa=1.0, theta=0.04, sigma=0.1, rho=0.0, s0=1.0, nu0=0.04,
                     maturity=1.0, strike=1.0)
    assert min_valid_n(p, TruncationBounds.constant(0.2), 0.2) == 1


def test_parameter_validation():
    with pytest.raises(ValueError):
        HestonParams(mu=0.0, kappa=1.0, theta=0.04, sigma=0.5, rho=0.0, s0=1, nu0=0.04,
                     maturity=1, strike=1)  # Feller
    with pytest.raises(ValueError):
        HestonParams(mu=0.0, kappa=1.0, theta=0.04, sigma=0.1, rho=1.0, s0=1, nu0=0.04,
                     maturity=1, strike=1)
    with pytest.raises(ValueError):
        TruncationBounds(0.5, 0.5)
    with pytest.raises(ValueError):
        LatticeSpec.build(10, 0.5, HestonParams.table1(), TruncationBounds.table1())
    with pytest.raises(ValueError):
        LatticeSpec.build(-1, 5.0, HestonParams.table1(), TruncationBounds.table1())


def test_frozen_oracle_reproduces_in_high_precision():
    mpmath = pytest.importorskip("mpmath")
    mp = mpmath.mp
    mp.dps = 40
    mpf = mpmath.mpf
    mu, kappa, theta, sigma, rho = mpf("0.05"), mpf("1.15"), mpf("0.348"), mpf("0.39"), mpf("-0.64")
    h, st2 = mpf("0.09"), mpf(25)
    sq = mpmath.sqrt(mpf(1) / 400)
    mu_phi = mu - h / 2
    mu_psi = kappa / sigma * (theta - h) - rho * mu_phi
    sigma_psi = mpmath.sqrt((1 - rho**2) * h)
    coef = sq / (2 * mpmath.sqrt(st2))
    v = sigma_psi**2 / st2
    a = mpmath.sqrt(st2) * sq
    assert float(mu_psi) == pytest.approx(ORACLE["mu_psi"], rel=1e-15)
    assert float(sigma_psi) == pytest.approx(ORACLE["sigma_psi"], rel=1e-15)
    assert float(v / 2 + coef * mu_psi) == pytest.approx(ORACLE["p_xihat_raw"][0], rel=1e-15)
    assert float(v / 2 - coef * mu_psi) == pytest.approx(ORACLE["p_xihat_raw"][2], rel=1e-15)
    assert float(h / (st2 * (1 + mpmath.exp(a)))) == pytest.approx(ORACLE["q_xi"][0], rel=1e-15)
    assert float(100 * mpmath.exp(a)) == pytest.approx(ORACLE["price_1_1_0"], rel=1e-15)
