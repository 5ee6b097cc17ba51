"""Finite-difference reference solver for the bowed oscillator.

Integrates the first-order system

    dq/dt = omega * p
    dp/dt = -omega * q - F_B * phi(p - v_B)

with the implicit midpoint rule. The nonlinearity reduces to a scalar
root-find in the half-step momentum, solved by Newton-Raphson with a
bisection fallback (phi is bounded, so a bracket always exists). The
scheme is second order and, for F_B = 0, conserves p^2 + q^2 to round-off.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .friction import FrictionParams

NEWTON_TOL = 1e-12
NEWTON_MAX_ITER = 50


class ConfigError(ValueError):
    pass


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class OscillatorConfig:
    """Physical scenario: natural frequency, bow force/velocity, friction."""

    f: float = 100.0
    F_B: float = 10.0
    v_B: float = 0.2
    friction: FrictionParams = field(default_factory=FrictionParams)

    def __post_init__(self):
        if not (math.isfinite(self.f) and self.f > 0):
            raise ConfigError(f"natural frequency must be finite and > 0, got {self.f}")
        if not (math.isfinite(self.F_B) and self.F_B >= 0):
            raise ConfigError(f"bow force must be finite and >= 0, got {self.F_B}")
        if not math.isfinite(self.v_B):
            raise ConfigError(f"bow velocity must be finite, got {self.v_B}")

    @property
    def omega(self) -> float:
        return 2.0 * math.pi * self.f


@dataclass(frozen=True)
class InitialCondition:
    p0: float = 0.0
    q0: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.p0) and math.isfinite(self.q0)):
            raise ConfigError("initial condition must be finite")


@dataclass
class Trajectory:
    """Uniformly sampled (p, q) series starting at t0."""

    sample_rate: float
    t0: float
    p: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.float64)
        self.q = np.asarray(self.q, dtype=np.float64)
        if self.p.shape != self.q.shape or self.p.ndim != 1 or self.p.size < 1:
            raise ValueError("p and q must be equal-length 1-D series of length >= 1")

    def __len__(self):
        return self.p.size

    @property
    def t(self) -> np.ndarray:
        return self.t0 + np.arange(self.p.size) / self.sample_rate

    def eta(self, config: OscillatorConfig) -> np.ndarray:
        """Bow-relative velocity p - v_B."""
        return self.p - config.v_B

    def displacement(self, config: OscillatorConfig) -> np.ndarray:
        """Mass displacement u = q / omega."""
        return self.q / config.omega


def _solve_half_step(p, q, dt, omega, f_b, v_b, a, step_index):
    """Root of g(ph) = 2(ph-p) + dt*om*q + (dt*om)^2/2*ph + dt*F_B*phi(ph-v_B)."""
    s2a = math.sqrt(2.0 * a)
    c = 2.0 + 0.5 * dt * dt * omega * omega
    r = dt * omega * q - 2.0 * p
    k = dt * f_b
    ph = p  # guess: eta at the last known sample
    for _ in range(NEWTON_MAX_ITER):
        eta = ph - v_b
        e = s2a * math.exp(-a * eta * eta + 0.5)
        g = c * ph + r + k * eta * e
        if abs(g) < NEWTON_TOL:
            return ph
        dg = c + k * e * (1.0 - 2.0 * a * eta * eta)
        if dg == 0.0:
            break
        ph -= g / dg

    # Newton failed: bisect. g -> +-inf monotonically at large |ph| since phi
    # is bounded, so an expanding bracket around the guess must capture a root.
    def g_of(x):
        eta = x - v_b
        return c * x + r + k * s2a * eta * math.exp(-a * eta * eta + 0.5)

    w = max(4.0 * abs(v_b), 1e-3)
    lo, hi = p - w, p + w
    for _ in range(80):
        if g_of(lo) <= 0.0 <= g_of(hi):
            break
        w *= 2.0
        lo, hi = p - w, p + w
    else:
        raise SolverError(f"no bracket for the implicit step at step {step_index}")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        gm = g_of(mid)
        if abs(gm) < NEWTON_TOL or hi - lo < 1e-16 * max(1.0, abs(mid)):
            return mid
        if gm > 0.0:
            hi = mid
        else:
            lo = mid
    raise SolverError(f"implicit step did not converge at step {step_index}")


def step(config: OscillatorConfig, state: tuple[float, float], dt: float) -> tuple[float, float]:
    """One implicit-midpoint update of (p, q)."""
    if not dt > 0:
        raise ConfigError(f"dt must be > 0, got {dt}")
    p, q = float(state[0]), float(state[1])
    ph = _solve_half_step(p, q, dt, config.omega, config.F_B, config.v_B,
                          config.friction.a, 0)
    return 2.0 * ph - p, q + dt * config.omega * ph


def newton_iterations(config: OscillatorConfig, state: tuple[float, float],
                      dt: float) -> int:
    """Newton iteration count for one step (diagnostic)."""
    p, q = float(state[0]), float(state[1])
    omega, f_b, v_b, a = config.omega, config.F_B, config.v_B, config.friction.a
    s2a = math.sqrt(2.0 * a)
    c = 2.0 + 0.5 * dt * dt * omega * omega
    r = dt * omega * q - 2.0 * p
    k = dt * f_b
    ph = p
    for it in range(NEWTON_MAX_ITER):
        eta = ph - v_b
        e = s2a * math.exp(-a * eta * eta + 0.5)
        g = c * ph + r + k * eta * e
        if abs(g) < NEWTON_TOL:
            return it
        ph -= g / (c + k * e * (1.0 - 2.0 * a * eta * eta))
    return NEWTON_MAX_ITER


def simulate(config: OscillatorConfig, ic: InitialCondition, sample_rate: float,
             duration: float, t0: float = 0.0) -> Trajectory:
    """Integrate for ``duration`` seconds at ``sample_rate``.

    Returns floor(duration*sample_rate)+1 samples; sample 0 is the initial
    condition exactly. Requires ``sample_rate >= 40*f`` so the oscillation
    is resolved. Raises ``SolverError`` (naming the step) if the implicit
    solve fails.
    """
    if sample_rate < 40.0 * config.f:
        raise ConfigError(
            f"sample_rate {sample_rate} under-resolves f={config.f} (need >= {40 * config.f})")
    if not duration > 0:
        raise ConfigError(f"duration must be > 0, got {duration}")
    n_steps = int(math.floor(duration * sample_rate))
    p_out = np.empty(n_steps + 1)
    q_out = np.empty(n_steps + 1)
    p, q = float(ic.p0), float(ic.q0)
    p_out[0] = p
    q_out[0] = q

    dt = 1.0 / sample_rate
    omega = config.omega
    f_b = config.F_B
    v_b = config.v_B
    a = config.friction.a
    s2a = math.sqrt(2.0 * a)
    c = 2.0 + 0.5 * dt * dt * omega * omega
    k = dt * f_b
    dtom = dt * omega
    mexp = math.exp

    for i in range(n_steps):
        # inline Newton on the half-step momentum (hot loop)
        r = dtom * q - 2.0 * p
        ph = p
        ok = False
        for _ in range(NEWTON_MAX_ITER):
            eta = ph - v_b
            e = s2a * mexp(-a * eta * eta + 0.5)
            g = c * ph + r + k * eta * e
            if abs(g) < NEWTON_TOL:
                ok = True
                break
            dg = c + k * e * (1.0 - 2.0 * a * eta * eta)
            if dg == 0.0:
                break
            ph -= g / dg
        if not ok:
            ph = _solve_half_step(p, q, dt, omega, f_b, v_b, a, i)
        q += dtom * ph
        p = 2.0 * ph - p
        p_out[i + 1] = p
        q_out[i + 1] = q

    return Trajectory(sample_rate=sample_rate, t0=t0, p=p_out, q=q_out)


def residuals(traj: Trajectory, config: OscillatorConfig) -> tuple[np.ndarray, np.ndarray]:
    """Pointwise ODE residuals from grid derivatives.

    r1 = dq/dt - omega*p and r2 = dp/dt + omega*q + F_B*phi(eta), with
    central differences in the interior and one-sided stencils at the ends.
    """
    if len(traj) < 3:
        raise ValueError("residuals need at least 3 samples")
    from .friction import phi

    dt = 1.0 / traj.sample_rate
    omega = config.omega
    qdot = np.gradient(traj.q, dt)
    pdot = np.gradient(traj.p, dt)
    r1 = qdot - omega * traj.p
    r2 = pdot + omega * traj.q + config.F_B * phi(traj.eta(config), config.friction)
    return r1, r2


def export_csv(traj: Trajectory, config: OscillatorConfig, path) -> None:
    """Write ``t,p,q,eta`` rows with 17 significant digits."""
    t = traj.t
    eta = traj.eta(config)
    with open(path, "w") as fh:
        fh.write("t,p,q,eta\n")
        for i in range(len(traj)):
            fh.write(f"{t[i]:.17g},{traj.p[i]:.17g},{traj.q[i]:.17g},{eta[i]:.17g}\n")


def read_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Read back a trajectory CSV as (t, p, q, eta) arrays."""
    data = np.genfromtxt(path, delimiter=",", skip_header=1)
    data = np.atleast_2d(data)
    if data.shape[1] != 4:
        raise ValueError(f"expected 4 columns t,p,q,eta in {path}")
    return data[:, 0], data[:, 1], data[:, 2], data[:, 3]
