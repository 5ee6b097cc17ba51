"""Network architectures: RFF embedding, gated FCNN, PINN and DeepONet heads.

Every architecture exists twice: a plain-numpy forward for inference and a
tape-recorded forward (``*_dual``) used during training, where the time
input may carry a forward-mode tangent. Both follow the exact same
operation order, so their outputs agree bitwise.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Dual, ParamVector, Tape

CHECKPOINT_FORMAT = "bowsim-checkpoint-1"


class WindowWarning(UserWarning):
    """Evaluation outside the trained time window (extrapolation)."""


# ---------------------------------------------------------------------------
# random Fourier features


@dataclass
class RffEmbedding:
    """Frozen sinusoidal feature map [cos(2*pi*x@B), sin(2*pi*x@B)].

    ``b_matrix`` has shape (in_dim, c_rff) with N(0, sigma_prime^2) entries,
    drawn once from ``seed`` and never trained.
    """

    b_matrix: np.ndarray
    sigma_prime: float
    seed: int

    @classmethod
    def create(cls, in_dim: int, c_rff: int, sigma_prime: float, seed: int) -> "RffEmbedding":
        rng = np.random.default_rng(seed)
        b = rng.normal(0.0, sigma_prime, size=(in_dim, c_rff))
        return cls(b_matrix=b, sigma_prime=float(sigma_prime), seed=int(seed))

    @property
    def in_dim(self) -> int:
        return self.b_matrix.shape[0]

    @property
    def c_rff(self) -> int:
        return self.b_matrix.shape[1]

    @property
    def out_dim(self) -> int:
        return 2 * self.c_rff


def rff_embed(x, emb: RffEmbedding) -> np.ndarray:
    """Embed a sample (1-D) or batch (2-D); output width is 2*c_rff."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != emb.in_dim:
        raise ValueError(f"rff_embed: input width {x.shape} != ({emb.in_dim},)")
    proj = x @ ((2.0 * math.pi) * emb.b_matrix)
    out = np.concatenate((np.cos(proj), np.sin(proj)), axis=1)
    return out[0] if single else out


def rff_embed_dual(tape: Tape, x: Dual, emb: RffEmbedding) -> Dual:
    if x.v.value.shape[1] != emb.in_dim:
        raise ValueError(f"rff_embed: input width {x.v.value.shape} != ({emb.in_dim},)")
    w = tape.leaf((2.0 * math.pi) * emb.b_matrix)
    proj = ad.daffine(tape, x, w)
    return ad.dconcat(tape, ad.dcos(tape, proj), ad.dsin(tape, proj))


# ---------------------------------------------------------------------------
# gated fully connected network


@dataclass(frozen=True)
class ModifiedFcnn:
    """FCNN with two tanh streams U, V gated into every hidden layer.

    Forward pass:

        U = tanh(X W_U + b_U),  V = tanh(X W_V + b_V)
        H1 = tanh(X W_Z1 + b_Z1)
        Z_k = tanh(H_k W_Zk + b_Zk)           k = 1..depth
        H_{k+1} = (1 - Z_k) * U + Z_k * V
        O = H_{depth+1} W_O + b_O

    The first Z weight acts on both X and H1, which forces the input width
    to equal the hidden width (the RFF output 2*c_rff supplies that width).
    """

    in_dim: int
    width: int
    depth: int
    out_dim: int
    prefix: str = ""

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.in_dim != self.width:
            raise ValueError(
                f"gated recursion reuses the first Z weights on the input, so "
                f"in_dim ({self.in_dim}) must equal width ({self.width})")

    def layer_specs(self) -> list[tuple[str, tuple]]:
        p = self.prefix
        specs = [
            (f"{p}W_U", (self.in_dim, self.width)), (f"{p}b_U", (self.width,)),
            (f"{p}W_V", (self.in_dim, self.width)), (f"{p}b_V", (self.width,)),
        ]
        for k in range(1, self.depth + 1):
            specs.append((f"{p}W_Z{k}", (self.width, self.width)))
            specs.append((f"{p}b_Z{k}", (self.width,)))
        specs.append((f"{p}W_O", (self.width, self.out_dim)))
        specs.append((f"{p}b_O", (self.out_dim,)))
        return specs


def fcnn_forward(net: ModifiedFcnn, params: ParamVector, x: np.ndarray) -> np.ndarray:
    """Plain-numpy forward of a feature batch (n, in_dim) -> (n, out_dim)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.in_dim:
        raise ValueError(f"fcnn_forward: input {x.shape} incompatible with in_dim {net.in_dim}")
    p = net.prefix
    u = np.tanh(x @ params[f"{p}W_U"] + params[f"{p}b_U"])
    v = np.tanh(x @ params[f"{p}W_V"] + params[f"{p}b_V"])
    h = np.tanh(x @ params[f"{p}W_Z1"] + params[f"{p}b_Z1"])
    for k in range(1, net.depth + 1):
        z = np.tanh(h @ params[f"{p}W_Z{k}"] + params[f"{p}b_Z{k}"])
        h = ((-z) + 1.0) * u + z * v
    return h @ params[f"{p}W_O"] + params[f"{p}b_O"]


def fcnn_forward_dual(tape: Tape, net: ModifiedFcnn, leaves: dict, x: Dual) -> Dual:
    """Tape-recorded forward, mirroring ``fcnn_forward`` op for op."""
    p = net.prefix
    u = ad.dtanh(tape, ad.daffine(tape, x, leaves[f"{p}W_U"], leaves[f"{p}b_U"]))
    v = ad.dtanh(tape, ad.daffine(tape, x, leaves[f"{p}W_V"], leaves[f"{p}b_V"]))
    h = ad.dtanh(tape, ad.daffine(tape, x, leaves[f"{p}W_Z1"], leaves[f"{p}b_Z1"]))
    for k in range(1, net.depth + 1):
        z = ad.dtanh(tape, ad.daffine(tape, h, leaves[f"{p}W_Z{k}"], leaves[f"{p}b_Z{k}"]))
        gate = ad.dcadd(tape, ad.dneg(tape, z), 1.0)
        h = ad.dadd(tape, ad.dmul(tape, gate, u), ad.dmul(tape, z, v))
    return ad.daffine(tape, h, leaves[f"{p}W_O"], leaves[f"{p}b_O"])


def glorot_init(specs: list[tuple[str, tuple]], rng: np.random.Generator) -> ParamVector:
    """Glorot-uniform matrices, zero biases, in declaration order."""
    arrays = []
    for name, shape in specs:
        if len(shape) == 2:
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            arrays.append((name, rng.uniform(-limit, limit, size=shape)))
        else:
            arrays.append((name, np.zeros(shape)))
    return ParamVector.from_arrays(arrays)


# ---------------------------------------------------------------------------
# PINN: two networks map (scaled, embedded) time to p and q


@dataclass
class PinnModel:
    arch: ModifiedFcnn
    rff_p: RffEmbedding
    rff_q: RffEmbedding
    scale_t: float
    scale_pq: float
    t_start: float
    params: ParamVector

    @classmethod
    def create(cls, width: int, depth: int, c_rff: int, sigma_prime: float,
               scale_t: float, scale_pq: float, seed: int, t_start: float = 0.0) -> "PinnModel":
        if 2 * c_rff != width:
            raise ValueError(f"need 2*c_rff == width, got c_rff={c_rff}, width={width}")
        rng = np.random.default_rng(seed)
        seed_p = int(rng.integers(2 ** 31))
        seed_q = int(rng.integers(2 ** 31))
        rff_p = RffEmbedding.create(1, c_rff, sigma_prime, seed_p)
        rff_q = RffEmbedding.create(1, c_rff, sigma_prime, seed_q)
        arch_p = ModifiedFcnn(width, width, depth, 1, prefix="p.")
        arch_q = ModifiedFcnn(width, width, depth, 1, prefix="q.")
        params = glorot_init(arch_p.layer_specs() + arch_q.layer_specs(), rng)
        return cls(arch_p, rff_p, rff_q, float(scale_t), float(scale_pq),
                   float(t_start), params)

    @property
    def arch_q(self) -> ModifiedFcnn:
        return ModifiedFcnn(self.arch.in_dim, self.arch.width, self.arch.depth,
                            self.arch.out_dim, prefix="q.")

    @property
    def t_end(self) -> float:
        return self.t_start + self.scale_t


def pinn_eval(model: PinnModel, t) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate (p_hat, q_hat) at times ``t`` (1-D array or scalar).

    Times outside [t_start, t_start + scale_t] trigger a WindowWarning but
    still evaluate (extrapolation is allowed for diagnostics).
    """
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    tol = 1e-12 * max(1.0, abs(model.t_end))
    if np.any(t < model.t_start - tol) or np.any(t > model.t_end + tol):
        warnings.warn("evaluating PINN outside its trained window", WindowWarning)
    x = ((t - model.t_start) * (1.0 / model.scale_t))[:, None]
    p = model.scale_pq * fcnn_forward(model.arch, model.params, rff_embed(x, model.rff_p))
    q = model.scale_pq * fcnn_forward(model.arch_q, model.params, rff_embed(x, model.rff_q))
    return p[:, 0], q[:, 0]


def pinn_eval_dual(tape: Tape, model: PinnModel, leaves: dict, t: Dual) -> tuple[Dual, Dual]:
    """Recorded evaluation; tangent of ``t`` propagates to both outputs."""
    x = ad.dcmul(tape, ad.dcadd(tape, t, -model.t_start), 1.0 / model.scale_t)
    p = ad.dcmul(tape, fcnn_forward_dual(
        tape, model.arch, leaves, rff_embed_dual(tape, x, model.rff_p)), model.scale_pq)
    q = ad.dcmul(tape, fcnn_forward_dual(
        tape, model.arch_q, leaves, rff_embed_dual(tape, x, model.rff_q)), model.scale_pq)
    return p, q


# ---------------------------------------------------------------------------
# PI-DeepONet: branch takes embedded time, trunk takes the embedded IC


@dataclass
class DeepOnetModel:
    branch: ModifiedFcnn
    trunk: ModifiedFcnn
    rff_t: RffEmbedding
    rff_ic: RffEmbedding
    scale_t: float
    scale_pq: float
    params: ParamVector

    @classmethod
    def create(cls, width: int, depth: int, c_rff: int, c_out: int, sigma_prime: float,
               scale_t: float, scale_pq: float, seed: int) -> "DeepOnetModel":
        if c_out % 2 != 0:
            raise ValueError(f"merge splits the output in half, c_out must be even, got {c_out}")
        if 2 * c_rff != width:
            raise ValueError(f"need 2*c_rff == width, got c_rff={c_rff}, width={width}")
        rng = np.random.default_rng(seed)
        seed_t = int(rng.integers(2 ** 31))
        seed_ic = int(rng.integers(2 ** 31))
        rff_t = RffEmbedding.create(1, c_rff, sigma_prime, seed_t)
        rff_ic = RffEmbedding.create(2, c_rff, sigma_prime, seed_ic)
        branch = ModifiedFcnn(width, width, depth, c_out, prefix="branch.")
        trunk = ModifiedFcnn(width, width, depth, c_out, prefix="trunk.")
        params = glorot_init(branch.layer_specs() + trunk.layer_specs(), rng)
        return cls(branch, trunk, rff_t, rff_ic, float(scale_t), float(scale_pq), params)

    @property
    def c_out(self) -> int:
        return self.branch.out_dim


def deeponet_eval(model: DeepOnetModel, t, ic) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate (p_hat, q_hat) for paired times (n,) and ICs (n, 2)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    ic = np.asarray(ic, dtype=np.float64)
    if ic.ndim == 1:
        ic = np.broadcast_to(ic, (t.size, 2)).copy()
    if ic.shape != (t.size, 2):
        raise ValueError(f"ic batch {ic.shape} does not match t batch ({t.size},)")
    b = fcnn_forward(model.branch, model.params,
                     rff_embed(t[:, None] * (1.0 / model.scale_t), model.rff_t))
    r = fcnn_forward(model.trunk, model.params,
                     rff_embed(ic * (1.0 / model.scale_pq), model.rff_ic))
    h = model.c_out // 2
    p = model.scale_pq * np.sum(b[:, :h] * r[:, :h], axis=1)
    q = model.scale_pq * np.sum(b[:, h:] * r[:, h:], axis=1)
    return p, q


def deeponet_eval_dual(tape: Tape, model: DeepOnetModel, leaves: dict,
                       t: Dual, ic_node) -> tuple[Dual, Dual]:
    """Recorded evaluation; only the time input may carry a tangent."""
    xt = ad.dcmul(tape, t, 1.0 / model.scale_t)
    b = fcnn_forward_dual(tape, model.branch, leaves, rff_embed_dual(tape, xt, model.rff_t))
    xic = ad.dcmul(tape, Dual(ic_node), 1.0 / model.scale_pq)
    r = fcnn_forward_dual(tape, model.trunk, leaves, rff_embed_dual(tape, xic, model.rff_ic))
    h = model.c_out // 2
    p = ad.dcmul(tape, ad.drowsum(tape, ad.dmul(
        tape, ad.dslice_cols(tape, b, 0, h), ad.dslice_cols(tape, r, 0, h))), model.scale_pq)
    q = ad.dcmul(tape, ad.drowsum(tape, ad.dmul(
        tape, ad.dslice_cols(tape, b, h, model.c_out),
        ad.dslice_cols(tape, r, h, model.c_out))), model.scale_pq)
    return p, q


def pinn_predict(windows: list[PinnModel], t) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate a time-marched stack of windows over arbitrary times.

    Each time is routed to the window whose span contains it; times past the
    last window extrapolate from it (with a WindowWarning).
    """
    if not windows:
        raise ValueError("empty window stack")
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    p = np.empty_like(t)
    q = np.empty_like(t)
    starts = np.array([w.t_start for w in windows])
    idx = np.clip(np.searchsorted(starts, t, side="right") - 1, 0, len(windows) - 1)
    for w, model in enumerate(windows):
        mask = idx == w
        if np.any(mask):
            p[mask], q[mask] = pinn_eval(model, t[mask])
    return p, q


def deeponet_rollout(model: DeepOnetModel, ic, t) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate over times beyond one window by chaining predicted states.

    The operator is trained on t in [0, scale_t]; longer spans are covered
    by feeding the predicted state at each window boundary back in as the
    next initial condition.
    """
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if np.any(t < 0):
        raise ValueError("rollout times must be >= 0")
    s_t = model.scale_t
    n_win = int(np.floor(np.max(t) / s_t)) + 1 if t.size else 1
    ics = np.empty((n_win, 2))
    ics[0] = np.asarray(ic, dtype=np.float64)
    for w in range(n_win - 1):
        pw, qw = deeponet_eval(model, np.array([s_t]), ics[w][None, :])
        ics[w + 1] = (pw[0], qw[0])
    idx = np.clip((t / s_t).astype(int), 0, n_win - 1)
    local = t - idx * s_t
    p, q = deeponet_eval(model, local, ics[idx])
    return p, q


# ---------------------------------------------------------------------------
# checkpoints: JSON header line + raw little-endian float64 blocks


def _embedding_header(emb: RffEmbedding) -> dict:
    return {"in_dim": emb.in_dim, "c_rff": emb.c_rff,
            "sigma_prime": emb.sigma_prime, "seed": emb.seed}


def _window_header(m: PinnModel) -> dict:
    return {
        "width": m.arch.width, "depth": m.arch.depth,
        "scale_t": m.scale_t, "scale_pq": m.scale_pq, "t_start": m.t_start,
        "rff_p": _embedding_header(m.rff_p), "rff_q": _embedding_header(m.rff_q),
        "layers": [[n, list(s)] for n, s in
                   zip(m.params.names, m.params.shapes)],
    }


def save_checkpoint(path, model, extra: dict | None = None) -> None:
    """Serialize a DeepOnetModel or a list of PinnModel windows.

    Layout: one JSON header line, then each window's RFF B matrices followed
    by its flat parameter block, all raw '<f8'. Round-trips bitwise.
    """
    blocks: list[np.ndarray] = []
    if isinstance(model, DeepOnetModel):
        header = {
            "format": CHECKPOINT_FORMAT, "kind": "deeponet",
            "width": model.branch.width, "depth": model.branch.depth,
            "c_out": model.c_out,
            "scale_t": model.scale_t, "scale_pq": model.scale_pq,
            "rff_t": _embedding_header(model.rff_t),
            "rff_ic": _embedding_header(model.rff_ic),
            "layers": [[n, list(s)] for n, s in
                       zip(model.params.names, model.params.shapes)],
        }
        blocks += [model.rff_t.b_matrix, model.rff_ic.b_matrix, model.params.flat]
    else:
        windows = list(model)
        header = {"format": CHECKPOINT_FORMAT, "kind": "pinn",
                  "windows": [_window_header(w) for w in windows]}
        for w in windows:
            blocks += [w.rff_p.b_matrix, w.rff_q.b_matrix, w.params.flat]
    if extra:
        header["extra"] = extra
    with open(path, "wb") as fh:
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
        for b in blocks:
            fh.write(np.asarray(b, dtype="<f8").tobytes())


def _read_block(buf: memoryview, offset: int, shape) -> tuple[np.ndarray, int]:
    size = int(np.prod(shape, dtype=np.int64))
    arr = np.frombuffer(buf, dtype="<f8", count=size, offset=offset).reshape(shape).copy()
    return arr, offset + 8 * size


def load_checkpoint(path):
    """Inverse of ``save_checkpoint``; returns the model (list for PINNs)."""
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        buf = memoryview(fh.read())
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a {CHECKPOINT_FORMAT} file: {path}")
    off = 0
    if header["kind"] == "deeponet":
        ht, hic = header["rff_t"], header["rff_ic"]
        bt, off = _read_block(buf, off, (ht["in_dim"], ht["c_rff"]))
        bic, off = _read_block(buf, off, (hic["in_dim"], hic["c_rff"]))
        names = [n for n, _ in header["layers"]]
        shapes = [tuple(s) for _, s in header["layers"]]
        flat, off = _read_block(buf, off, (sum(int(np.prod(s)) for s in shapes),))
        width, depth, c_out = header["width"], header["depth"], header["c_out"]
        return DeepOnetModel(
            branch=ModifiedFcnn(width, width, depth, c_out, prefix="branch."),
            trunk=ModifiedFcnn(width, width, depth, c_out, prefix="trunk."),
            rff_t=RffEmbedding(bt, ht["sigma_prime"], ht["seed"]),
            rff_ic=RffEmbedding(bic, hic["sigma_prime"], hic["seed"]),
            scale_t=header["scale_t"], scale_pq=header["scale_pq"],
            params=ParamVector(names, shapes, flat))
    if header["kind"] == "pinn":
        windows = []
        for wh in header["windows"]:
            hp, hq = wh["rff_p"], wh["rff_q"]
            bp, off = _read_block(buf, off, (hp["in_dim"], hp["c_rff"]))
            bq, off = _read_block(buf, off, (hq["in_dim"], hq["c_rff"]))
            names = [n for n, _ in wh["layers"]]
            shapes = [tuple(s) for _, s in wh["layers"]]
            flat, off = _read_block(buf, off, (sum(int(np.prod(s)) for s in shapes),))
            windows.append(PinnModel(
                arch=ModifiedFcnn(wh["width"], wh["width"], wh["depth"], 1, prefix="p."),
                rff_p=RffEmbedding(bp, hp["sigma_prime"], hp["seed"]),
                rff_q=RffEmbedding(bq, hq["sigma_prime"], hq["seed"]),
                scale_t=wh["scale_t"], scale_pq=wh["scale_pq"],
                t_start=wh["t_start"],
                params=ParamVector(names, shapes, flat)))
        return windows
    raise ValueError(f"unknown checkpoint kind {header['kind']!r}")
