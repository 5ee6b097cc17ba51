"""Prediction metrics, random-IC test sets, and trajectory diagnostics."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import fdm, nets
from .fdm import InitialCondition, OscillatorConfig, Trajectory
from .friction import PhaseLabel, in_stick_region


class MetricError(ValueError):
    pass


def nmse(pred, ref, normalize: str = "energy") -> float:
    """Normalized mean square error ||pred - ref||^2 / ||ref||^2.

    ``normalize="variance"`` divides by the centered reference energy
    instead (both conventions are reported alongside results).
    """
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise MetricError(f"shape mismatch {pred.shape} vs {ref.shape}")
    if normalize == "energy":
        denom = float(np.sum(ref * ref))
    elif normalize == "variance":
        centered = ref - ref.mean()
        denom = float(np.sum(centered * centered))
    else:
        raise MetricError(f"unknown normalization {normalize!r}")
    if denom == 0.0:
        raise MetricError("reference norm is zero")
    return float(np.sum((pred - ref) ** 2)) / denom


def ncc(pred, ref, centered: bool = False) -> float:
    """Normalized cross correlation in percent: 100 <pred,ref>/(|pred||ref|)."""
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise MetricError(f"shape mismatch {pred.shape} vs {ref.shape}")
    if centered:
        pred = pred - pred.mean()
        ref = ref - ref.mean()
    np_norm = float(np.linalg.norm(pred))
    nr_norm = float(np.linalg.norm(ref))
    if np_norm == 0.0 or nr_norm == 0.0:
        raise MetricError("zero-norm series in ncc")
    return 100.0 * float(pred @ ref) / (np_norm * nr_norm)


@dataclass
class TestSet:
    """Random ICs whose reference solutions stay inside the sampling box."""

    cases: list[InitialCondition]
    t_max: float
    scale_pq: float
    seed: int


def build_testset(config: OscillatorConfig, scale_pq: float, t_max: float,
                  n_cases: int, seed: int, filter_rate: float = 44_100.0,
                  max_draws: int | None = None) -> TestSet:
    """Rejection-sample ICs uniform in [-s, s]^2 whose audio-rate FDM
    solution keeps |p| and |q| within the same range over [0, t_max]."""
    rng = np.random.default_rng(seed)
    cases: list[InitialCondition] = []
    draws = 0
    cap = max_draws if max_draws is not None else 200 * n_cases
    while len(cases) < n_cases:
        if draws >= cap:
            raise MetricError(
                f"rejection sampling exhausted after {draws} draws "
                f"({len(cases)}/{n_cases} accepted)")
        draws += 1
        p0, q0 = rng.uniform(-scale_pq, scale_pq, size=2)
        ic = InitialCondition(float(p0), float(q0))
        try:
            traj = fdm.simulate(config, ic, filter_rate, t_max)
        except fdm.SolverError:
            continue
        if np.max(np.abs(traj.p)) <= scale_pq and np.max(np.abs(traj.q)) <= scale_pq:
            cases.append(ic)
    return TestSet(cases=cases, t_max=t_max, scale_pq=scale_pq, seed=seed)


@dataclass
class MetricReport:
    nmse_p: float
    nmse_q: float
    ncc_p: float
    ncc_q: float
    per_case: list[dict] = field(default_factory=list)
    failed_cases: int = 0
    nmse_normalization: str = "energy"
    ncc_centered: bool = False

    def to_json(self) -> str:
        return json.dumps({
            "mean": {"nmse_p": self.nmse_p, "nmse_q": self.nmse_q,
                     "ncc_p": self.ncc_p, "ncc_q": self.ncc_q},
            "per_case": self.per_case,
            "failed_cases": self.failed_cases,
            "conventions": {"nmse_normalization": self.nmse_normalization,
                            "ncc_centered": self.ncc_centered},
        }, sort_keys=True, indent=2)


def eval_times(t_max: float, reference_rate: float, n_points: int) -> np.ndarray:
    """Evaluation grid aligned to the reference solver's sample grid."""
    n_ref = int(round(t_max * reference_rate))
    idx = np.unique(np.round(np.linspace(0, n_ref, n_points)).astype(np.int64))
    return idx / reference_rate


def evaluate_case(model: nets.DeepOnetModel, config: OscillatorConfig,
                  ic: InitialCondition, t_max: float,
                  reference_rate: float = 4_410_000.0,
                  n_points: int = 800,
                  nmse_normalization: str = "energy",
                  ncc_centered: bool = False) -> dict:
    """Metrics of the rolled-out operator against the reference solver."""
    times = eval_times(t_max, reference_rate, n_points)
    traj = fdm.simulate(config, ic, reference_rate, t_max)
    idx = np.round(times * reference_rate).astype(np.int64)
    p_ref, q_ref = traj.p[idx], traj.q[idx]
    p_hat, q_hat = nets.deeponet_rollout(model, (ic.p0, ic.q0), times)
    return {
        "ic": [ic.p0, ic.q0],
        "nmse_p": nmse(p_hat, p_ref, nmse_normalization),
        "nmse_q": nmse(q_hat, q_ref, nmse_normalization),
        "ncc_p": ncc(p_hat, p_ref, ncc_centered),
        "ncc_q": ncc(q_hat, q_ref, ncc_centered),
    }


def evaluate_testset(model: nets.DeepOnetModel, config: OscillatorConfig,
                     testset: TestSet, reference_rate: float = 4_410_000.0,
                     n_points: int = 800, nmse_normalization: str = "energy",
                     ncc_centered: bool = False) -> MetricReport:
    """Per-case and mean metrics over a test set; failed FDM cases are
    excluded and counted."""
    per_case: list[dict] = []
    failed = 0
    for ic in testset.cases:
        try:
            per_case.append(evaluate_case(
                model, config, ic, testset.t_max, reference_rate, n_points,
                nmse_normalization, ncc_centered))
        except fdm.SolverError:
            failed += 1
    if not per_case:
        raise MetricError("no test case could be evaluated")
    mean = {k: float(np.mean([c[k] for c in per_case]))
            for k in ("nmse_p", "nmse_q", "ncc_p", "ncc_q")}
    return MetricReport(mean["nmse_p"], mean["nmse_q"], mean["ncc_p"],
                        mean["ncc_q"], per_case, failed,
                        nmse_normalization, ncc_centered)


def stick_slip_segments(traj: Trajectory, config: OscillatorConfig
                        ) -> list[tuple[float, float, PhaseLabel]]:
    """Maximal constant-phase runs of the trajectory's relative velocity.

    Segments tile [t0, t_end] without gaps; boundaries sit on the first
    sample of each new phase.
    """
    if len(traj) == 0:
        raise ValueError("empty trajectory")
    stick = in_stick_region(traj.eta(config), config.friction)
    t = traj.t
    change = np.nonzero(stick[1:] != stick[:-1])[0] + 1
    starts = np.concatenate(([0], change))
    ends = np.concatenate((change, [len(traj) - 1]))
    return [(float(t[s]), float(t[e]),
             PhaseLabel.STICK if stick[s] else PhaseLabel.SLIP)
            for s, e in zip(starts, ends)]


def stick_fraction(traj: Trajectory, config: OscillatorConfig) -> float:
    """Fraction of samples inside the highly nonlinear (stick) region."""
    return float(np.mean(in_stick_region(traj.eta(config), config.friction)))


@dataclass
class ResidualSummary:
    name: str
    median_r1: float
    iqr_r1: float
    max_r1: float
    median_r2: float
    iqr_r2: float
    max_r2: float


def residual_compare(entries: list[tuple[str, tuple[np.ndarray, np.ndarray]]]
                     ) -> list[ResidualSummary]:
    """Median/IQR/max of |r1|, |r2| for each named residual pair."""
    if not entries:
        raise ValueError("need at least one entry")
    out = []
    for name, (r1, r2) in entries:
        a1, a2 = np.abs(np.asarray(r1)), np.abs(np.asarray(r2))
        q1_lo, q1_hi = np.percentile(a1, [25, 75])
        q2_lo, q2_hi = np.percentile(a2, [25, 75])
        out.append(ResidualSummary(
            name=name,
            median_r1=float(np.median(a1)), iqr_r1=float(q1_hi - q1_lo),
            max_r1=float(np.max(a1)),
            median_r2=float(np.median(a2)), iqr_r2=float(q2_hi - q2_lo),
            max_r2=float(np.max(a2))))
    return out


def model_residuals(p_hat: np.ndarray, q_hat: np.ndarray, sample_rate: float,
                    config: OscillatorConfig) -> tuple[np.ndarray, np.ndarray]:
    """Grid-derivative ODE residuals of any uniformly sampled prediction."""
    traj = Trajectory(sample_rate=sample_rate, t0=0.0, p=p_hat, q=q_hat)
    return fdm.residuals(traj, config)
