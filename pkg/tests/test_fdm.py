import math

import numpy as np
import pytest

from bowsim import fdm
from bowsim.fdm import (ConfigError, InitialCondition, OscillatorConfig,
                        SolverError, Trajectory, newton_iterations, residuals,
                        simulate, step)
from bowsim.friction import FrictionParams

CFG0 = OscillatorConfig(f=100.0, F_B=0.0, v_B=0.2)
CFG10 = OscillatorConfig(f=100.0, F_B=10.0, v_B=0.2)


def exact_unforced(t):
    """q = cos(w t), p = -sin(w t) solves the F_B=0 system with IC (0, 1)."""
    w = CFG0.omega
    return -np.sin(w * t), np.cos(w * t)


def test_unforced_matches_exact_solution():
    traj = simulate(CFG0, InitialCondition(0.0, 1.0), 4_410_000.0, 0.0025)
    p_ref, q_ref = exact_unforced(traj.t)
    assert np.max(np.abs(traj.p - p_ref)) < 1e-8
    assert np.max(np.abs(traj.q - q_ref)) < 1e-8
    assert traj.p[0] == 0.0 and traj.q[0] == 1.0
    assert abs(traj.p[-1] + 1.0) < 1e-8 and abs(traj.q[-1]) < 1e-8


def test_second_order_convergence_unforced():
    errs = []
    for rate in (44_100.0, 88_200.0, 176_400.0):
        traj = simulate(CFG0, InitialCondition(0.0, 1.0), rate, 0.01)
        p_ref, q_ref = exact_unforced(traj.t)
        errs.append(max(np.max(np.abs(traj.p - p_ref)), np.max(np.abs(traj.q - q_ref))))
    for e_coarse, e_fine in zip(errs, errs[1:]):
        assert 4.0 * 0.8 <= e_coarse / e_fine <= 4.0 * 1.2


def test_self_convergence_with_friction():
    base = 441_000.0
    sols = {}
    for rate in (base, 2 * base, 4 * base):
        sols[rate] = simulate(CFG10, InitialCondition(0.0, 0.0), rate, 0.02)
    def l2_rel(a, b):  # compare on the coarse grid
        bb = b.p[::2]
        return np.linalg.norm(a.p - bb) / np.linalg.norm(bb)
    d1 = l2_rel(sols[base], sols[2 * base])
    d2 = l2_rel(sols[2 * base], sols[4 * base])
    assert 4.0 * 0.7 <= d1 / d2 <= 4.0 * 1.3


def test_energy_conserved_unforced_one_million_steps():
    cfg = OscillatorConfig(f=100.0, F_B=0.0, v_B=0.0)
    traj = simulate(cfg, InitialCondition(0.0, 1.0), 1_000_000.0, 1.0)
    energy = 0.5 * (traj.p ** 2 + traj.q ** 2)
    assert len(traj) == 1_000_001
    assert np.max(np.abs(energy - energy[0])) / energy[0] < 1e-10


def test_step_continuity_dt_to_zero():
    drift = []
    for dt in (1e-4, 1e-5, 1e-6):
        p, q = step(CFG0, (0.0, 1.0), dt)
        drift.append(math.hypot(p - 0.0, q - 1.0))
    assert drift[0] > drift[1] > drift[2]
    assert drift[2] < 1e-3  # O(dt)


def test_newton_converges_quickly_at_reference_rate():
    assert newton_iterations(CFG10, (0.0, 0.0), 1.0 / 4_410_000.0) <= 5


def test_continuation_is_bitwise():
    rate = 441_000.0
    full = simulate(CFG10, InitialCondition(0.0, 0.0), rate, 0.02)
    first = simulate(CFG10, InitialCondition(0.0, 0.0), rate, 0.01)
    second = simulate(CFG10, InitialCondition(first.p[-1], first.q[-1]), rate,
                      0.01, t0=first.t[-1])
    stitched_p = np.concatenate((first.p, second.p[1:]))
    stitched_q = np.concatenate((first.q, second.q[1:]))
    assert np.array_equal(stitched_p, full.p)
    assert np.array_equal(stitched_q, full.q)


def test_determinism_bitwise():
    a = simulate(CFG10, InitialCondition(0.0, 0.0), 441_000.0, 0.01)
    b = simulate(CFG10, InitialCondition(0.0, 0.0), 441_000.0, 0.01)
    assert np.array_equal(a.p, b.p) and np.array_equal(a.q, b.q)


def test_residuals_constant_trajectory():
    cfg = OscillatorConfig(f=100.0, F_B=0.0, v_B=0.2)
    traj = Trajectory(sample_rate=44_100.0, t0=0.0,
                      p=np.zeros(100), q=np.ones(100))
    r1, r2 = residuals(traj, cfg)
    assert np.allclose(r1, 0.0, atol=1e-12)
    assert np.allclose(r2, cfg.omega, rtol=1e-12)


def test_residuals_of_exact_harmonic_are_small():
    rate = 4_410_000.0
    t = np.arange(0, int(0.005 * rate) + 1) / rate
    p_ref, q_ref = exact_unforced(t)
    traj = Trajectory(sample_rate=rate, t0=0.0, p=p_ref, q=q_ref)
    r1, r2 = residuals(traj, CFG0)
    bound = 1e-4 * CFG0.omega
    assert np.max(np.abs(r1)) < bound
    assert np.max(np.abs(r2)) < bound


def test_low_rate_residuals_exceed_high_rate():
    cfg = OscillatorConfig(f=100.0, F_B=1000.0, v_B=0.2)
    lo = simulate(cfg, InitialCondition(0.0, 0.0), 44_100.0, 0.05)
    hi = simulate(cfg, InitialCondition(0.0, 0.0), 441_000.0, 0.05)
    r1_lo, r2_lo = residuals(lo, cfg)
    r1_hi, r2_hi = residuals(hi, cfg)
    assert np.median(np.abs(r2_lo)) > np.median(np.abs(r2_hi))
    assert np.isfinite(r2_lo).all()  # large but bounded


def test_csv_round_trip_lossless(tmp_path):
    traj = simulate(CFG10, InitialCondition(0.1, -0.2), 44_100.0, 0.002)
    path = tmp_path / "traj.csv"
    fdm.export_csv(traj, CFG10, path)
    t, p, q, eta = fdm.read_csv(path)
    assert np.array_equal(p, traj.p)
    assert np.array_equal(q, traj.q)
    assert np.array_equal(eta, traj.eta(CFG10))
    assert np.array_equal(t, traj.t)


def test_trajectory_derived_series():
    traj = Trajectory(sample_rate=10.0, t0=0.5, p=np.array([1.0, 2.0]),
                      q=np.array([3.0, 4.0]))
    assert np.array_equal(traj.eta(CFG10), np.array([0.8, 1.8]))
    assert np.allclose(traj.displacement(CFG10), np.array([3.0, 4.0]) / CFG10.omega)
    assert np.allclose(traj.t, [0.5, 0.6])


def test_preconditions_rejected():
    with pytest.raises(ConfigError):
        simulate(CFG10, InitialCondition(0, 0), 1000.0, 0.1)  # under-resolved
    with pytest.raises(ConfigError):
        simulate(CFG10, InitialCondition(0, 0), 44_100.0, 0.0)
    with pytest.raises(ConfigError):
        InitialCondition(math.nan, 0.0)
    with pytest.raises(ConfigError):
        OscillatorConfig(f=-1.0)
    with pytest.raises(ConfigError):
        OscillatorConfig(F_B=-5.0)
    with pytest.raises(ValueError):
        residuals(Trajectory(44_100.0, 0.0, np.zeros(2), np.zeros(2)), CFG10)
