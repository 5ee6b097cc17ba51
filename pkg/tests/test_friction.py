import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bowsim.friction import (FrictionParams, PhaseLabel, classify_phase,
                             dphi_deta, in_stick_region, nonlinear_boundary,
                             phi)

A100 = FrictionParams(100.0)

# closed-form values at a=100, evaluated independently at high precision
PHI_AT_0P2 = 0.085411098368046577      # sqrt(200)*0.2*exp(-3.5)
DPHI_AT_0 = 23.316439815971243         # sqrt(200)*exp(1/2)
BOUNDARY_A100 = 0.12247448713915890    # sqrt(3/200)


def test_phi_at_origin():
    assert phi(0.0, A100) == 0.0


def test_phi_analytic_maximum():
    eta_star = 1.0 / math.sqrt(2.0 * A100.a)
    assert phi(eta_star, A100) == pytest.approx(1.0, abs=1e-12)


def test_phi_closed_form_value():
    assert phi(0.2, A100) == pytest.approx(PHI_AT_0P2, abs=1e-13)


def test_phi_bounded_by_one_on_dense_grid():
    eta = np.linspace(-3.0, 3.0, 200_001)
    vals = np.abs(phi(eta, A100))
    assert np.max(vals) <= 1.0 + 1e-12
    assert np.max(vals) >= 1.0 - 1e-9  # attained near +-1/sqrt(2a)
    peaks = eta[np.argsort(vals)[-2:]]
    assert np.allclose(np.abs(peaks), 1.0 / math.sqrt(200.0), atol=1e-4)


def test_dphi_at_zero():
    assert dphi_deta(0.0, A100) == pytest.approx(DPHI_AT_0, rel=1e-14)


def test_dphi_zero_at_phi_maximum():
    assert dphi_deta(1.0 / math.sqrt(200.0), A100) == pytest.approx(0.0, abs=1e-10)


def test_dphi_matches_central_difference():
    h = 1e-6
    for eta in np.linspace(-1.0, 1.0, 41):
        fd = (phi(eta + h, A100) - phi(eta - h, A100)) / (2 * h)
        slope = dphi_deta(eta, A100)
        assert slope == pytest.approx(fd, rel=1e-6, abs=1e-6)


@settings(max_examples=200, deadline=None)
@given(st.floats(-5.0, 5.0), st.floats(0.5, 500.0))
def test_phi_odd_symmetry_exact(eta, a):
    p = FrictionParams(a)
    assert phi(-eta, p) == -phi(eta, p)


@settings(max_examples=100, deadline=None)
@given(st.floats(-2.0, 2.0), st.floats(0.5, 500.0))
def test_dphi_even_symmetry(eta, a):
    p = FrictionParams(a)
    assert dphi_deta(-eta, p) == dphi_deta(eta, p)


def test_boundary_value_a100():
    assert nonlinear_boundary(A100) == pytest.approx(BOUNDARY_A100, abs=1e-12)
    # consistent with the +-0.12 nonlinear-region edge
    assert abs(nonlinear_boundary(A100) - 0.12) < 0.01


def test_boundary_trivial_value():
    assert nonlinear_boundary(FrictionParams(1.5)) == 1.0


def test_boundary_is_minimum_of_slope_by_bisection():
    # locate the positive root of d2phi/deta2 with a derivative-free bisection
    def second(eta, h=1e-7):
        return (dphi_deta(eta + h, A100) - dphi_deta(eta - h, A100)) / (2 * h)

    lo, hi = 0.05, 0.3
    assert second(lo) < 0 < second(hi)
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if second(mid) < 0:
            lo = mid
        else:
            hi = mid
    assert 0.5 * (lo + hi) == pytest.approx(nonlinear_boundary(A100), abs=1e-6)


def test_classify_phase_examples():
    assert classify_phase(0.0, A100) is PhaseLabel.STICK
    assert classify_phase(0.2, A100) is PhaseLabel.SLIP
    assert classify_phase(-0.122, A100) is PhaseLabel.STICK


def test_classify_phase_symmetric_two_transitions():
    eta = np.linspace(-1.0, 1.0, 20001)
    stick = in_stick_region(eta, A100)
    assert np.array_equal(stick, stick[::-1])
    transitions = np.sum(stick[1:] != stick[:-1])
    assert transitions == 2


def test_nonfinite_eta_rejected():
    for bad in (math.nan, math.inf, -math.inf):
        with pytest.raises(ValueError):
            phi(bad, A100)
        with pytest.raises(ValueError):
            dphi_deta(bad, A100)
        with pytest.raises(ValueError):
            classify_phase(bad, A100)


def test_invalid_params_rejected():
    for bad in (0.0, -1.0, math.nan):
        with pytest.raises(ValueError):
            FrictionParams(bad)
