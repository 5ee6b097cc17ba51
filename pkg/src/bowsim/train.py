"""Loss assembly, loss balancing, optimizers, and training strategies.

The collocation losses are recorded once per training phase on a tape and
replayed every step (parameter leaves alias the optimizer-updated flat
vector), so a step costs one forward replay plus one reverse sweep.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import nets
from .autodiff import Dual, ParamVector, Tape
from .fdm import InitialCondition, OscillatorConfig, Trajectory

log = logging.getLogger(__name__)

LOSS_TERMS = ("ode1", "ode2", "ic1", "ic2", "ob1", "ob2")


class TrainingError(RuntimeError):
    """Raised on non-finite loss; carries the last finite state.

    ``model`` (when set) has its parameters restored to the last finite
    snapshot, ready for checkpointing.
    """

    def __init__(self, msg, last_params: ParamVector | None = None, model=None):
        super().__init__(msg)
        self.last_params = last_params
        self.model = model


@dataclass
class LossWeights:
    ode1: float = 10.0
    ode2: float = 10.0
    ic1: float = 1e6
    ic2: float = 1e6
    ob1: float = 0.0
    ob2: float = 0.0

    def __post_init__(self):
        for name in LOSS_TERMS:
            if not (math.isfinite(getattr(self, name)) and getattr(self, name) >= 0):
                raise ValueError(f"loss weight {name} must be finite and >= 0")

    @classmethod
    def manual(cls, hybrid: bool = False) -> "LossWeights":
        return cls(ob1=1.0 if hybrid else 0.0, ob2=1.0 if hybrid else 0.0)

    @classmethod
    def annealing_init(cls, hybrid: bool = False) -> "LossWeights":
        # adaptive weights start flat and move toward the gradient-ratio target
        w = 1.0 if hybrid else 0.0
        return cls(ode1=1.0, ode2=1.0, ic1=1.0, ic2=1.0, ob1=w, ob2=w)

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in LOSS_TERMS}


@dataclass
class TrainPlan:
    """Optimizer, schedule, sampling, and strategy settings for one run."""

    optimizer: str = "adam"
    lr0: float = 0.003
    decay_rate: float = 0.9
    decay_steps: int = 10000
    annealing: bool = False
    anneal_alpha: float = 0.1
    anneal_every: int = 100
    m_tm: int = 1
    m_cau: int = 1
    eta_cau: float = 0.1
    causal_degrade_factor: float = 10.0
    n_ode: int = 1000
    n_ic: int = 1
    n_ob: int = 0
    groups: int = 100
    t_per_group: int = 100
    batch_size: int = 0
    max_steps: int = 10000
    seed: int = 0
    convergence_rtol: float = 1e-4
    convergence_horizon: int = 2000
    soap_refresh: int = 10
    soap_damping: float = 1e-6
    log_every: int = 100

    def __post_init__(self):
        if self.optimizer not in ("adam", "soap"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.m_tm < 1 or self.m_cau < 1:
            raise ValueError("m_tm and m_cau must be >= 1")
        if self.m_cau > 1 and not self.eta_cau > 0:
            raise ValueError("eta_cau must be > 0 when causal training is enabled")


@dataclass
class ObservationSet:
    """Supervised (t, p, q) samples from a reference trajectory, one IC."""

    ic: tuple[float, float]
    t: np.ndarray
    p: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        self.p = np.asarray(self.p, dtype=np.float64)
        self.q = np.asarray(self.q, dtype=np.float64)
        if not (self.t.shape == self.p.shape == self.q.shape) or self.t.ndim != 1:
            raise ValueError("observation series must be equal-length 1-D arrays")

    @classmethod
    def from_trajectory(cls, traj: Trajectory, ic: InitialCondition,
                        n_obs: int) -> "ObservationSet":
        idx = np.unique(np.round(np.linspace(0, len(traj) - 1, n_obs)).astype(int))
        return cls((ic.p0, ic.q0), traj.t[idx], traj.p[idx], traj.q[idx])


# ---------------------------------------------------------------------------
# loss recording


@dataclass
class LossNodes:
    ode1: object
    ode2: object
    ic1: object
    ic2: object
    ob1: object = None
    ob2: object = None

    def value(self, name: str) -> float:
        node = getattr(self, name)
        return 0.0 if node is None else float(node.value)

    def values(self) -> dict:
        return {k: self.value(k) for k in LOSS_TERMS}


def _record_phi(tape: Tape, eta, a: float):
    # sqrt(2a) * eta * exp(-a*eta^2 + 1/2), composed from primitives
    e = tape.exp(tape.cadd(tape.cmul(tape.square(eta), -a), 0.5))
    return tape.cmul(tape.mul(eta, e), math.sqrt(2.0 * a))


def _record_ode_losses(tape: Tape, p: Dual, q: Dual, config: OscillatorConfig):
    omega = config.omega
    r1 = tape.sub(q.d, tape.cmul(p.v, omega))
    ode1 = tape.mean(tape.square(r1))
    eta = tape.cadd(p.v, -config.v_B)
    r2 = tape.add(tape.add(p.d, tape.cmul(q.v, omega)),
                  tape.cmul(_record_phi(tape, eta, config.friction.a), config.F_B))
    ode2 = tape.mean(tape.square(r2))
    return ode1, ode2


def record_pinn_losses(tape: Tape, model: nets.PinnModel, leaves: dict,
                       config: OscillatorConfig, t_colloc: np.ndarray,
                       ic: InitialCondition) -> LossNodes:
    t_colloc = np.asarray(t_colloc, dtype=np.float64)
    if t_colloc.size == 0:
        raise ValueError("empty collocation set")
    t = Dual(tape.leaf(t_colloc[:, None]), tape.leaf(np.ones((t_colloc.size, 1))))
    p, q = nets.pinn_eval_dual(tape, model, leaves, t)
    ode1, ode2 = _record_ode_losses(tape, p, q, config)
    t0 = Dual(tape.leaf(np.array([[model.t_start]])))
    p0, q0 = nets.pinn_eval_dual(tape, model, leaves, t0)
    ic1 = tape.mean(tape.square(tape.cadd(p0.v, -ic.p0)))
    ic2 = tape.mean(tape.square(tape.cadd(q0.v, -ic.q0)))
    return LossNodes(ode1, ode2, ic1, ic2)


def _merge_heads(tape: Tape, model: nets.DeepOnetModel, b: Dual, r: Dual):
    h = model.c_out // 2
    p = ad.dcmul(tape, ad.drowsum(tape, ad.dmul(
        tape, ad.dslice_cols(tape, b, 0, h), ad.dslice_cols(tape, r, 0, h))),
        model.scale_pq)
    q = ad.dcmul(tape, ad.drowsum(tape, ad.dmul(
        tape, ad.dslice_cols(tape, b, h, model.c_out),
        ad.dslice_cols(tape, r, h, model.c_out))), model.scale_pq)
    return p, q


def record_deeponet_losses(tape: Tape, model: nets.DeepOnetModel, leaves: dict,
                           config: OscillatorConfig, t_rows: np.ndarray,
                           group_idx: np.ndarray, ic_groups: np.ndarray,
                           obs: ObservationSet | None = None,
                           handles: dict | None = None) -> LossNodes:
    """Physics + IC (+ observation) losses for one batch.

    ``group_idx`` maps each collocation row to its IC group; the trunk runs
    once over the unique group ICs and rows gather from it. When a
    ``handles`` dict is passed, the batch's time leaf and gather node are
    exposed so the caller can swap batches in place and replay.
    """
    if t_rows.size == 0:
        raise ValueError("empty collocation set")
    xic = ad.dcmul(tape, Dual(tape.leaf(ic_groups)), 1.0 / model.scale_pq)
    trunk_all = nets.fcnn_forward_dual(
        tape, model.trunk, leaves, nets.rff_embed_dual(tape, xic, model.rff_ic))

    t = Dual(tape.leaf(t_rows[:, None]), tape.leaf(np.ones((t_rows.size, 1))))
    xt = ad.dcmul(tape, t, 1.0 / model.scale_t)
    b = nets.fcnn_forward_dual(
        tape, model.branch, leaves, nets.rff_embed_dual(tape, xt, model.rff_t))
    r = ad.dgather(tape, trunk_all, group_idx)
    if handles is not None:
        handles["t_leaf"] = t.v
        handles["gather_node"] = r.v
    p, q = _merge_heads(tape, model, b, r)
    ode1, ode2 = _record_ode_losses(tape, p, q, config)

    n_groups = ic_groups.shape[0]
    t0 = ad.dcmul(tape, Dual(tape.leaf(np.zeros((1, 1)))), 1.0 / model.scale_t)
    b0 = nets.fcnn_forward_dual(
        tape, model.branch, leaves, nets.rff_embed_dual(tape, t0, model.rff_t))
    b0_rows = ad.dgather(tape, b0, np.zeros(n_groups, dtype=np.int64))
    p0, q0 = _merge_heads(tape, model, b0_rows, trunk_all)
    ic1 = tape.mean(tape.square(tape.sub(p0.v, tape.leaf(ic_groups[:, 0:1]))))
    ic2 = tape.mean(tape.square(tape.sub(q0.v, tape.leaf(ic_groups[:, 1:2]))))

    ob1 = ob2 = None
    if obs is not None:
        if obs.t.size == 0:
            raise ValueError("hybrid mode requires a non-empty observation set")
        xic_ob = ad.dcmul(tape, Dual(tape.leaf(
            np.asarray(obs.ic, dtype=np.float64)[None, :])), 1.0 / model.scale_pq)
        trunk_ob = nets.fcnn_forward_dual(
            tape, model.trunk, leaves, nets.rff_embed_dual(tape, xic_ob, model.rff_ic))
        t_ob = ad.dcmul(tape, Dual(tape.leaf(obs.t[:, None])), 1.0 / model.scale_t)
        b_ob = nets.fcnn_forward_dual(
            tape, model.branch, leaves, nets.rff_embed_dual(tape, t_ob, model.rff_t))
        r_ob = ad.dgather(tape, trunk_ob, np.zeros(obs.t.size, dtype=np.int64))
        p_ob, q_ob = _merge_heads(tape, model, b_ob, r_ob)
        ob1 = tape.mean(tape.square(tape.sub(p_ob.v, tape.leaf(obs.p[:, None]))))
        ob2 = tape.mean(tape.square(tape.sub(q_ob.v, tape.leaf(obs.q[:, None]))))
    return LossNodes(ode1, ode2, ic1, ic2, ob1, ob2)


def record_total_loss(tape: Tape, losses: LossNodes, weights: LossWeights,
                      handles: dict | None = None):
    """Weighted sum of the present loss terms; zero-weight terms are skipped
    so a hybrid run with zero observation weights reproduces the pure
    physics loss bitwise.

    With ``handles``, each term's weight node is exposed under
    ``w_<term>`` so annealing can update weights in place between replays.
    """
    total = None
    for name in LOSS_TERMS:
        node = getattr(losses, name)
        w = getattr(weights, name)
        if node is None or (w == 0.0 and handles is None):
            continue
        term = tape.cmul(node, w)
        if handles is not None:
            handles[f"w_{name}"] = term
        total = term if total is None else tape.add(total, term)
    if total is None:
        total = tape.leaf(np.zeros(()))
    return total


def _apply_weights(handles: dict, weights: LossWeights) -> None:
    for name in LOSS_TERMS:
        node = handles.get(f"w_{name}")
        if node is not None:
            node.aux = getattr(weights, name)


def pinn_losses(model: nets.PinnModel, config: OscillatorConfig,
                t_colloc, ic: InitialCondition) -> tuple[float, float, float, float]:
    """Loss values (ODE1, ODE2, IC1, IC2) at the model's current parameters."""
    tape = Tape()
    leaves = tape.param_leaves(model.params)
    nodes = record_pinn_losses(tape, model, leaves, config, np.asarray(t_colloc), ic)
    return nodes.value("ode1"), nodes.value("ode2"), nodes.value("ic1"), nodes.value("ic2")


def total_loss(losses, weights: LossWeights) -> float:
    """Numeric counterpart of ``record_total_loss`` for plain values.

    ``losses`` is a mapping term-name -> value (missing terms count as 0).
    """
    return sum(getattr(weights, k) * losses.get(k, 0.0) for k in LOSS_TERMS)


def anneal_weights(weights: LossWeights, term_grads: dict,
                   alpha: float = 0.1) -> LossWeights:
    """Gradient-ratio loss balancing with ODE1 as the reference term.

    lambda_i <- (1-alpha)*lambda_i + alpha * max|g_ref| / mean|g_i|; terms
    with zero mean gradient (or a zero reference) are left unchanged.
    """
    ref = float(np.max(np.abs(term_grads["ode1"])))
    if ref == 0.0:
        return weights
    updates = {}
    for name in LOSS_TERMS:
        if name == "ode1" or name not in term_grads:
            continue
        denom = float(np.mean(np.abs(term_grads[name])))
        if denom == 0.0:
            continue
        old = getattr(weights, name)
        updates[name] = (1.0 - alpha) * old + alpha * (ref / denom)
    return replace(weights, **updates)


# ---------------------------------------------------------------------------
# optimizers


def lr_schedule(step: int, plan: TrainPlan) -> float:
    """Exponential decay with a continuous exponent."""
    if step < 0:
        raise ValueError("step must be >= 0")
    return plan.lr0 * plan.decay_rate ** (step / plan.decay_steps)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def init(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n))


def adam_step(state: AdamState, params: ParamVector, grad_flat: np.ndarray,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """Bias-corrected Adam update, in place."""
    if grad_flat.shape != params.flat.shape:
        raise ValueError("gradient shape mismatch")
    state.t += 1
    state.m = beta1 * state.m + (1.0 - beta1) * grad_flat
    state.v = beta2 * state.v + (1.0 - beta2) * grad_flat * grad_flat
    mhat = state.m / (1.0 - beta1 ** state.t)
    vhat = state.v / (1.0 - beta2 ** state.t)
    params.flat -= lr * mhat / (np.sqrt(vhat) + eps)


@dataclass
class SoapLayerState:
    acc_l: np.ndarray | None = None
    acc_r: np.ndarray | None = None
    q_l: np.ndarray | None = None
    q_r: np.ndarray | None = None
    m: np.ndarray | None = None
    v: np.ndarray | None = None


@dataclass
class SoapState:
    layers: list
    t: int = 0
    refresh: int = 10
    damping: float = 1e-6

    @classmethod
    def init(cls, params: ParamVector, refresh: int = 10,
             damping: float = 1e-6) -> "SoapState":
        layers = []
        for shape in params.shapes:
            st = SoapLayerState(m=np.zeros(shape), v=np.zeros(shape))
            if len(shape) == 2:
                st.acc_l = np.zeros((shape[0], shape[0]))
                st.acc_r = np.zeros((shape[1], shape[1]))
            layers.append(st)
        return cls(layers=layers, refresh=refresh, damping=damping)


def _soap_refresh_layer(st: SoapLayerState, damping: float, index: int) -> None:
    """Recompute a layer's eigenbases and carry the moments over.

    The rotated first moment maps exactly under the basis change
    (m' = A m B with A = Q_L'^T Q_L, B = Q_R^T Q_R'); the elementwise second
    moment uses the mass-preserving square-transition map, which is exact
    whenever the change is a signed permutation (e.g. diagonal gradients).
    """
    try:
        q_l_new = np.linalg.eigh(
            st.acc_l + damping * np.eye(st.acc_l.shape[0]))[1]
        q_r_new = np.linalg.eigh(
            st.acc_r + damping * np.eye(st.acc_r.shape[0]))[1]
    except np.linalg.LinAlgError:
        log.warning("SOAP eigendecomposition failed for layer %d; "
                    "falling back to Adam", index)
        q_l_new = q_r_new = None
    a = q_l_new.T if q_l_new is not None else np.eye(st.acc_l.shape[0])
    b = q_r_new if q_r_new is not None else np.eye(st.acc_r.shape[0])
    if st.q_l is not None:
        a = a @ st.q_l
    if st.q_r is not None:
        b = st.q_r.T @ b
    st.m = a @ st.m @ b
    st.v = (a * a) @ st.v @ (b * b)
    st.q_l, st.q_r = q_l_new, q_r_new


def soap_step(state: SoapState, params: ParamVector, grad_layers: list,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """Adam in the eigenbasis of per-layer GG^T / G^TG accumulators.

    Matrix layers accumulate left/right Gram matrices every step and refresh
    their eigenbases every ``state.refresh`` steps; before the first refresh
    the bases are identities, so the update reproduces plain Adam. Vector
    layers always use plain Adam. A failed eigendecomposition falls back to
    Adam for that layer and is logged.
    """
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    do_refresh = state.t % state.refresh == 0
    for i, (st, g) in enumerate(zip(state.layers, grad_layers)):
        g = np.asarray(g, dtype=np.float64)
        if st.acc_l is not None:
            st.acc_l += g @ g.T
            st.acc_r += g.T @ g
            if do_refresh:
                _soap_refresh_layer(st, state.damping, i)
        rotated = st.q_l is not None and st.q_r is not None
        if rotated:
            g = st.q_l.T @ g @ st.q_r
        st.m = beta1 * st.m + (1.0 - beta1) * g
        st.v = beta2 * st.v + (1.0 - beta2) * g * g
        step = (st.m / bc1) / (np.sqrt(st.v / bc2) + eps)
        if rotated:
            step = st.q_l @ step @ st.q_r.T
        params.view(i)[...] -= lr * step


class Optimizer:
    """Uniform step interface over Adam and SOAP."""

    def __init__(self, plan: TrainPlan, params: ParamVector):
        self.plan = plan
        if plan.optimizer == "soap":
            self.state = SoapState.init(params, plan.soap_refresh, plan.soap_damping)
        else:
            self.state = AdamState.init(params.n)

    def step(self, params: ParamVector, grad_layers: list, lr: float) -> None:
        if isinstance(self.state, SoapState):
            soap_step(self.state, params, grad_layers, lr)
        else:
            adam_step(self.state, params, params.flatten_layers(grad_layers), lr)


# ---------------------------------------------------------------------------
# convergence + causal scheduling


class ConvergenceMonitor:
    """Stops when the best loss stalls over a step horizon.

    Compares the best value inside the trailing window against the best
    value seen before it; robust to step-to-step oscillation.
    """

    def __init__(self, horizon: int, rtol: float):
        self.horizon = horizon
        self.rtol = rtol
        self.window: deque[float] = deque()
        self.prior_best = math.inf

    def reset(self):
        self.window.clear()
        self.prior_best = math.inf

    def update(self, value: float) -> bool:
        self.window.append(value)
        if len(self.window) > self.horizon:
            self.prior_best = min(self.prior_best, self.window.popleft())
        if not math.isfinite(self.prior_best):
            return False
        improvement = (self.prior_best - min(self.window)) / max(abs(self.prior_best), 1e-300)
        return improvement < self.rtol


def causal_next_active(l_ode1: float, active: int, m_cau: int, eta_cau: float) -> int:
    """Number of active chunks after seeing the current active-set ODE1 loss.

    Growth is monotone and one chunk at a time: the next chunk joins only
    once the residual loss on the current set is below the threshold.
    """
    if active < 1 or active > m_cau:
        raise ValueError("active chunk count out of range")
    if active < m_cau and l_ode1 < eta_cau:
        return active + 1
    return active


# ---------------------------------------------------------------------------
# training drivers


def _history_row(step: int, lr: float, losses: LossNodes, weights: LossWeights) -> dict:
    row = {"step": step, "lr": lr}
    vals = losses.values()
    for k in LOSS_TERMS:
        row[f"L_{k}"] = vals[k]
        row[f"lambda_{k}"] = getattr(weights, k)
    return row


def export_history(path, rows: list[dict]) -> None:
    cols = (["step", "lr"] + [f"L_{k}" for k in LOSS_TERMS]
            + [f"lambda_{k}" for k in LOSS_TERMS])
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for r in rows:
            fh.write(",".join(f"{r[c]:.17g}" if c != "step" else str(r[c])
                              for c in cols) + "\n")


def _term_gradients(tape: Tape, losses: LossNodes, leaves: dict,
                    params: ParamVector) -> dict:
    grads = {}
    leaf_list = list(leaves.values())
    for name in LOSS_TERMS:
        node = getattr(losses, name)
        if node is None:
            continue
        grads[name] = params.flatten_layers(tape.gradient(node, leaf_list))
    return grads


def train_pinn_window(window_index: int, plan: TrainPlan,
                      config: OscillatorConfig, scale_t: float, scale_pq: float,
                      ic: InitialCondition, width: int, depth: int, c_rff: int,
                      sigma_prime: float) -> tuple[nets.PinnModel, list[dict]]:
    """Train one time-marching window to convergence (or the step cap).

    Full batch over ``plan.n_ode`` uniform collocation points; causal
    chunking per ``plan.m_cau``. Returns the trained window model and its
    loss history rows.
    """
    t_start = window_index * scale_t
    model = nets.PinnModel.create(width, depth, c_rff, sigma_prime, scale_t,
                                  scale_pq, seed=plan.seed + 1000 * window_index,
                                  t_start=t_start)
    rng = np.random.default_rng([plan.seed, window_index, 17])
    t_colloc = np.sort(t_start + rng.uniform(0.0, scale_t, size=plan.n_ode))

    weights = (LossWeights.annealing_init() if plan.annealing
               else LossWeights.manual())
    optimizer = Optimizer(plan, model.params)
    monitor = ConvergenceMonitor(plan.convergence_horizon, plan.convergence_rtol)
    chunk_edges = t_start + scale_t * np.arange(1, plan.m_cau + 1) / plan.m_cau
    active = 1
    pending_causal_check = False
    pre_append_params: np.ndarray | None = None

    def build(active_chunks: int):
        n_active = int(np.searchsorted(t_colloc, chunk_edges[active_chunks - 1],
                                       side="right"))
        n_active = max(n_active, 1)
        tape = Tape()
        leaves = tape.param_leaves(model.params)
        losses = record_pinn_losses(tape, model, leaves, config,
                                    t_colloc[:n_active], ic)
        handles: dict = {}
        total = record_total_loss(tape, losses, weights, handles)
        return tape, leaves, losses, total, handles

    tape, leaves, losses, total, handles = build(active)
    history: list[dict] = []
    last_finite = model.params.copy()
    step = 0
    while step < plan.max_steps:
        step += 1
        tape.replay(total, {})
        if not math.isfinite(float(total.value)):
            model.params.flat[:] = last_finite.flat
            raise TrainingError(
                f"non-finite loss at step {step} (window {window_index})",
                last_params=last_finite, model=[model])
        last_finite.flat[:] = model.params.flat

        if plan.annealing and step % plan.anneal_every == 1:
            weights = anneal_weights(
                weights, _term_gradients(tape, losses, leaves, model.params),
                plan.anneal_alpha)
            _apply_weights(handles, weights)
            tape.replay(total, {})

        grad_layers = tape.gradient(total, list(leaves.values()))
        optimizer.step(model.params, grad_layers, lr_schedule(step, plan))

        if step % plan.log_every == 0 or step == 1:
            history.append(_history_row(step, lr_schedule(step, plan), losses, weights))

        l_ode1 = float(losses.ode1.value)
        if plan.m_cau > 1 and active < plan.m_cau and l_ode1 < plan.eta_cau:
            pre_append_params = model.params.flat.copy()
            active = causal_next_active(l_ode1, active, plan.m_cau, plan.eta_cau)
            pending_causal_check = True
            tape, leaves, losses, total, handles = build(active)
            monitor.reset()
            continue

        if monitor.update(float(total.value)):
            if pending_causal_check and l_ode1 > plan.causal_degrade_factor * plan.eta_cau:
                # the appended chunk biased the whole window: roll back, stop
                model.params.flat[:] = pre_append_params
                log.info("causal training terminated early at chunk %d/%d "
                         "(window %d)", active - 1, plan.m_cau, window_index)
                break
            break
    if step >= plan.max_steps:
        log.info("window %d hit the step cap (%d)", window_index, plan.max_steps)
    history.append(_history_row(step, lr_schedule(step, plan), losses, weights))
    return model, history


def train_pinn(plan: TrainPlan, config: OscillatorConfig, scale_t: float,
               scale_pq: float, ic: InitialCondition, width: int, depth: int,
               c_rff: int, sigma_prime: float) -> tuple[list[nets.PinnModel], list[dict]]:
    """Time-marching: one network per window, chained through end states."""
    windows: list[nets.PinnModel] = []
    history: list[dict] = []
    ic_i = ic
    for i in range(plan.m_tm):
        model, rows = train_pinn_window(i, plan, config, scale_t, scale_pq,
                                        ic_i, width, depth, c_rff, sigma_prime)
        windows.append(model)
        for r in rows:
            r["window"] = i
        history.extend(rows)
        p_end, q_end = nets.pinn_eval(model, np.array([model.t_end]))
        ic_i = InitialCondition(float(p_end[0]), float(q_end[0]))
    return windows, history


@dataclass
class DeepOnetDataset:
    """Per-group ICs paired with fresh uniform time samples."""

    ics: np.ndarray       # (groups, 2) in [-s_pq, s_pq]^2
    t: np.ndarray         # (groups, t_per_group) in [0, s_t]
    scale_t: float
    scale_pq: float

    def __post_init__(self):
        if self.ics.ndim != 2 or self.ics.shape[1] != 2 or self.t.ndim != 2 \
                or self.t.shape[0] != self.ics.shape[0]:
            raise ValueError("dataset needs ics (G,2) and t (G,T)")

    @property
    def n_rows(self) -> int:
        return self.t.size

    def flat_rows(self) -> tuple[np.ndarray, np.ndarray]:
        """Row-major (t, ic) pairs: each group's IC repeated per t sample."""
        t_flat = self.t.ravel()
        ic_flat = np.repeat(self.ics, self.t.shape[1], axis=0)
        return t_flat, ic_flat


def build_deeponet_dataset(plan: TrainPlan, scale_t: float, scale_pq: float,
                           seed: int | None = None) -> DeepOnetDataset:
    rng = np.random.default_rng(plan.seed if seed is None else seed)
    ics = rng.uniform(-scale_pq, scale_pq, size=(plan.groups, 2))
    t = rng.uniform(0.0, scale_t, size=(plan.groups, plan.t_per_group))
    return DeepOnetDataset(ics=ics, t=t, scale_t=scale_t, scale_pq=scale_pq)


def train_deeponet(plan: TrainPlan, config: OscillatorConfig,
                   dataset: DeepOnetDataset, width: int, depth: int,
                   c_rff: int, c_out: int, sigma_prime: float,
                   observations: ObservationSet | None = None,
                   hybrid: bool = False) -> tuple[nets.DeepOnetModel, list[dict]]:
    """Mini-batch physics-informed operator training (optionally hybrid).

    Hybrid mode adds the supervised observation losses; it requires a
    non-empty observation set.
    """
    if hybrid and (observations is None or observations.t.size == 0):
        raise ValueError("hybrid mode requires a non-empty observation set")
    if not hybrid:
        observations = None
    model = nets.DeepOnetModel.create(width, depth, c_rff, c_out, sigma_prime,
                                      dataset.scale_t, dataset.scale_pq, plan.seed)
    t_all = dataset.t.ravel()
    group_all = np.repeat(np.arange(dataset.ics.shape[0], dtype=np.int64),
                          dataset.t.shape[1])
    n = t_all.size
    batch = plan.batch_size if 0 < plan.batch_size < n else n
    batch_rng = np.random.default_rng([plan.seed, 29])

    weights = (LossWeights.annealing_init(hybrid) if plan.annealing
               else LossWeights.manual(hybrid))
    optimizer = Optimizer(plan, model.params)
    monitor = ConvergenceMonitor(plan.convergence_horizon, plan.convergence_rtol)
    history: list[dict] = []
    last_finite = model.params.copy()

    full_batch = batch == n
    handles: dict = {}

    # record once; mini-batches swap the time leaf and gather plan in place
    if full_batch:
        first_t, first_g = t_all, group_all
    else:
        idx = batch_rng.choice(n, size=batch, replace=False)
        first_t, first_g = t_all[idx], group_all[idx]
    tape = Tape()
    leaves = tape.param_leaves(model.params)
    losses = record_deeponet_losses(tape, model, leaves, config, first_t,
                                    first_g, dataset.ics, observations, handles)
    total = record_total_loss(tape, losses, weights, handles)

    step = 0
    while step < plan.max_steps:
        step += 1
        if full_batch:
            tape.replay(total, {})
        else:
            if step > 1:
                idx = batch_rng.choice(n, size=batch, replace=False)
                np.copyto(handles["t_leaf"].value, t_all[idx][:, None])
                handles["gather_node"].aux = ad.gather_plan(group_all[idx])
            tape.replay(total, {})
        if not math.isfinite(float(total.value)):
            model.params.flat[:] = last_finite.flat
            raise TrainingError(f"non-finite loss at step {step}",
                                last_params=last_finite, model=model)
        last_finite.flat[:] = model.params.flat

        if plan.annealing and step % plan.anneal_every == 1:
            weights = anneal_weights(
                weights, _term_gradients(tape, losses, leaves, model.params),
                plan.anneal_alpha)
            _apply_weights(handles, weights)
            tape.replay(total, {})

        grad_layers = tape.gradient(total, list(leaves.values()))
        optimizer.step(model.params, grad_layers, lr_schedule(step, plan))

        if step % plan.log_every == 0 or step == 1:
            history.append(_history_row(step, lr_schedule(step, plan), losses, weights))
        if monitor.update(float(total.value)):
            break
    history.append(_history_row(step, lr_schedule(step, plan), losses, weights))
    return model, history
