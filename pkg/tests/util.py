"""Shared test helpers: random op graphs and finite-difference oracles."""

from __future__ import annotations

import numpy as np

from bowsim import autodiff as ad

UNARY_OPS = ("tanh", "sin", "cos", "exp", "square", "neg")


def random_graph_loss(seed: int):
    """A random scalar loss over a few random parameter leaves.

    Exercises every primitive; values stay O(1), so finite differences are
    trustworthy. Re-recording with the same seed is bitwise reproducible.
    Returns (loss_fn, params).
    """
    rng = np.random.default_rng(seed)
    batch = int(rng.integers(2, 5))
    width = int(rng.integers(2, 6))
    depth = int(rng.integers(1, 4))

    layers = [("x0", rng.normal(0.0, 0.5, size=(batch, width)))]
    for k in range(depth):
        layers.append((f"W{k}", rng.normal(0.0, 0.5, size=(width, width))))
        layers.append((f"b{k}", rng.normal(0.0, 0.2, size=(width,))))
    params = ad.ParamVector.from_arrays(layers)
    choices = rng.integers(0, len(UNARY_OPS), size=depth)
    extras = rng.integers(0, 5, size=depth)
    gather_idx = rng.integers(0, batch, size=batch + 2)
    const_arr = rng.normal(0.0, 0.5, size=(batch, width))

    def loss_fn(tape, leaves):
        h = leaves["x0"]
        const = tape.leaf(const_arr)
        for k in range(depth):
            h = tape.affine(h, leaves[f"W{k}"], leaves[f"b{k}"])
            opname = UNARY_OPS[choices[k]]
            if opname == "exp":
                h = tape.exp(tape.cmul(h, 0.2))
            elif opname == "square":
                h = tape.square(tape.cmul(h, 0.5))
            else:
                h = getattr(tape, opname)(h)
            extra = extras[k]
            if extra == 0:
                h = tape.add(h, const)
            elif extra == 1:
                h = tape.mul(h, const)
            elif extra == 2:
                h = tape.sub(h, const)
            elif extra == 3:
                half = width // 2
                h = tape.concat(tape.slice_cols(h, 0, half),
                                tape.slice_cols(h, half, width))
            elif extra == 4:
                h = tape.cadd(h, 0.3)
        g = tape.gather(h, gather_idx)
        return tape.add(tape.mean(tape.square(h)),
                        tape.cmul(tape.sum(tape.rowsum(tape.square(g))), 1e-3))

    return loss_fn, params


def fd_gradient(loss_fn, params: ad.ParamVector, rel_step: float = 1e-6) -> np.ndarray:
    """Central-difference gradient via tape replay (independent of reverse mode)."""
    op = ad.HvpOperator(loss_fn, params)
    flat = params.flat.copy()
    out = np.empty_like(flat)
    for i in range(flat.size):
        h = rel_step * max(1.0, abs(flat[i]))
        up = flat.copy()
        up[i] += h
        dn = flat.copy()
        dn[i] -= h
        out[i] = (op.loss_at(up) - op.loss_at(dn)) / (2.0 * h)
    op.loss_at(flat)
    return out


def max_rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-9) -> float:
    """Max elementwise relative error with an absolute floor for tiny values."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / scale))
