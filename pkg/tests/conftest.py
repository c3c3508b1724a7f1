import os

import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from shortfall_lattice.model import HestonParams, LatticeSpec, TruncationBounds

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def pytest_collection_modifyitems(config, items):
    if os.environ.get("SHORTFALL_EXTENDED") == "1":
        return
    skip = pytest.mark.skip(reason="extended run; set SHORTFALL_EXTENDED=1")
    for item in items:
        if "extended" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def params():
    return HestonParams.table1()


@pytest.fixture
def bounds():
    return TruncationBounds.table1()


@pytest.fixture
def spec400(params, bounds):
    return LatticeSpec.build(400, 5.0, params, bounds)


# a small instance whose raw kernels are valid everywhere for every n >= 1
TOY_PARAMS = HestonParams(mu=0.02, kappa=0.5, theta=0.1, sigma=0.3, rho=-0.5, s0=100.0,
                          nu0=0.1, maturity=1.0, strike=100.0)
TOY_BOUNDS = TruncationBounds(0.25, 0.4)
TOY_SIGMA_TILDE = 0.4


@pytest.fixture
def toy():
    return TOY_PARAMS, TOY_BOUNDS


@st.composite
def instances(draw):
    """Random valid (params, bounds, sigma_tilde)."""
    kappa = draw(st.floats(0.2, 3.0))
    theta = draw(st.floats(0.02, 0.5))
    sigma = draw(st.floats(0.05, 1.0).filter(lambda s: 2 * kappa * theta > s * s * 1.0001))
    rho = draw(st.floats(-0.95, 0.95))
    mu = draw(st.floats(-0.2, 0.2))
    nu0 = draw(st.floats(0.01, 0.6))
    s0 = draw(st.floats(20.0, 200.0))
    strike = draw(st.floats(20.0, 200.0))
    maturity = draw(st.floats(0.1, 3.0))
    lo = draw(st.floats(0.01, 0.5))
    hi = draw(st.floats(lo * 1.01, 2.0))
    sigma_tilde = draw(st.floats(hi, 3 * hi + 1.0))
    p = HestonParams(mu=mu, kappa=kappa, theta=theta, sigma=sigma, rho=rho, s0=s0, nu0=nu0,
                     maturity=maturity, strike=strike)
    return p, TruncationBounds(lo, hi), sigma_tilde


# ------------------------------------------------------------ acceptance log

_ACCEPTANCE = []


@pytest.fixture(scope="session")
def acceptance():
    """Collects ``(criterion, status, detail)`` lines for the terminal summary."""
    def record(criterion, status, detail=""):
        _ACCEPTANCE.append((criterion, status, detail))
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for criterion, status, detail in sorted(_ACCEPTANCE, key=lambda r: (int(r[0][1:].split("-")[0]), r[0])):
        terminalreporter.write_line(f"{criterion:<12} {status:<9} {detail}")
