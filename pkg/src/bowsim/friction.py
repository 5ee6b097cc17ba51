"""Soft static friction characteristic of the bowed oscillator.

The bow force acting on the mass is ``-F_B * phi(eta)`` where
``eta = p - v_B`` is the velocity of the mass relative to the bow and

    phi(eta) = sqrt(2a) * eta * exp(-a*eta**2 + 1/2)

is an odd, bounded pseudo-friction curve with peak magnitude 1 at
``eta = +-1/sqrt(2a)``. The shape parameter ``a`` controls how narrow the
highly nonlinear (stick) region around ``eta = 0`` is.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class FrictionParams:
    """Shape parameter of the friction curve. Requires ``a > 0``."""

    a: float = 100.0

    def __post_init__(self):
        if not (math.isfinite(self.a) and self.a > 0):
            raise ValueError(f"friction parameter a must be finite and > 0, got {self.a}")


class PhaseLabel(enum.Enum):
    STICK = "stick"
    SLIP = "slip"


def _check_finite(eta):
    arr = np.asarray(eta, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("relative velocity eta must be finite")
    return arr


def phi(eta, params: FrictionParams):
    """Friction force factor ``sqrt(2a)*eta*exp(-a*eta^2 + 1/2)``.

    Odd in ``eta``, bounded by 1 in magnitude. Accepts scalars or arrays;
    returns the same shape. Raises ``ValueError`` on non-finite input.
    """
    e = _check_finite(eta)
    a = params.a
    out = math.sqrt(2.0 * a) * e * np.exp(-a * e * e + 0.5)
    return float(out) if np.ndim(eta) == 0 else out


def dphi_deta(eta, params: FrictionParams):
    """Slope of the friction curve: ``sqrt(2a)*exp(-a*eta^2 + 1/2)*(1 - 2a*eta^2)``.

    Even in ``eta``. Accepts scalars or arrays.
    """
    e = _check_finite(eta)
    a = params.a
    e2 = e * e
    out = math.sqrt(2.0 * a) * np.exp(-a * e2 + 0.5) * (1.0 - 2.0 * a * e2)
    return float(out) if np.ndim(eta) == 0 else out


def nonlinear_boundary(params: FrictionParams) -> float:
    """Half-width ``sqrt(3/(2a))`` of the highly nonlinear low-|eta| region.

    This is the positive local minimizer of d(phi)/d(eta), i.e. the edge of
    the interval between the slope curve's two local minima. For a=100 it is
    ~0.122474 m/s.
    """
    return math.sqrt(3.0 / (2.0 * params.a))


def classify_phase(eta: float, params: FrictionParams) -> PhaseLabel:
    """Label a relative velocity as STICK (|eta| <= boundary) or SLIP.

    The low-|eta| highly nonlinear region is taken as the stick phase (bow
    and mass co-moving); outside it the mass slides against the bow.
    """
    e = _check_finite(eta)
    if np.ndim(eta) != 0:
        raise ValueError("classify_phase expects a scalar; use in_stick_region for arrays")
    return PhaseLabel.STICK if abs(float(e)) <= nonlinear_boundary(params) else PhaseLabel.SLIP


def in_stick_region(eta, params: FrictionParams) -> np.ndarray:
    """Vectorized stick test: True where ``|eta| <= nonlinear_boundary(a)``."""
    e = _check_finite(eta)
    return np.abs(e) <= nonlinear_boundary(params)
