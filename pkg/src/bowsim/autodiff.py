"""Tape-based differentiation engine over float64 numpy arrays.

Three modes, all exact to round-off:

* reverse mode (``Tape.gradient``) for parameter gradients,
* forward mode via dual pairs of tape nodes (``Dual`` + ``d*`` helpers) for
  derivatives with respect to network inputs; the tangent computation is
  emitted as ordinary tape primitives, so reverse mode differentiates
  through it,
* forward-over-reverse (``Tape.hvp``) for Hessian-vector products.

The primitive set is closed: affine map, elementwise tanh/sin/cos/exp/
square/product, add/sub/neg, scalar add/mul, full-array sum and mean,
row-wise sum, column concat/slice. Values are float64 arrays: 2-D
``(batch, features)`` activations, 1-D bias vectors, 0-d scalars.

Reductions delegate to ``numpy.sum``/``numpy.mean`` (pairwise summation),
which is bitwise reproducible run to run for a fixed platform; re-running
an identical tape therefore yields bitwise-identical gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class Node:
    """One recorded primitive (or leaf). Internal to Tape."""

    __slots__ = ("op", "inputs", "value", "aux", "requires_grad", "idx",
                 "grad", "dot", "grad_dot", "gbuf", "gscratch")

    def __init__(self, op, inputs, value, aux, requires_grad, idx):
        self.op = op
        self.inputs = inputs
        self.value = value
        self.aux = aux
        self.requires_grad = requires_grad
        self.idx = idx
        self.grad = None
        self.dot = None
        self.grad_dot = None
        self.gbuf = None       # reusable gradient buffer
        self.gscratch = None   # reusable buffer for fan-in accumulation

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node({self.op or 'leaf'}, shape={self.value.shape}, idx={self.idx})"


def _as_f64(x):
    a = np.asarray(x, dtype=np.float64)
    return a


def gather_plan(idx) -> tuple:
    """Precomputed (idx, sort order, unique rows, segment starts) for gather."""
    idx = np.asarray(idx, dtype=np.int64)
    order = np.argsort(idx, kind="stable")
    uniq, starts = np.unique(idx[order], return_index=True)
    return (idx, order, uniq, starts)


# ---------------------------------------------------------------------------
# forward evaluation rules (single source of truth, reused by replay)

def _fwd_affine(n):
    ins = n.inputs
    y = ins[0].value @ ins[1].value
    if len(ins) == 3:
        y = y + ins[2].value
    return y


_FWD = {
    "add": lambda n: n.inputs[0].value + n.inputs[1].value,
    "sub": lambda n: n.inputs[0].value - n.inputs[1].value,
    "mul": lambda n: n.inputs[0].value * n.inputs[1].value,
    "neg": lambda n: -n.inputs[0].value,
    "cadd": lambda n: n.inputs[0].value + n.aux,
    "cmul": lambda n: n.inputs[0].value * n.aux,
    "tanh": lambda n: np.tanh(n.inputs[0].value),
    "sin": lambda n: np.sin(n.inputs[0].value),
    "cos": lambda n: np.cos(n.inputs[0].value),
    "exp": lambda n: np.exp(n.inputs[0].value),
    "square": lambda n: np.square(n.inputs[0].value),
    "sum": lambda n: np.sum(n.inputs[0].value),
    "mean": lambda n: np.mean(n.inputs[0].value),
    "rowsum": lambda n: np.sum(n.inputs[0].value, axis=1, keepdims=True),
    "concat": lambda n: np.concatenate((n.inputs[0].value, n.inputs[1].value), axis=1),
    "slice": lambda n: n.inputs[0].value[:, n.aux[0]:n.aux[1]].copy(),
    "gather": lambda n: n.inputs[0].value[n.aux[0]],
    "affine": _fwd_affine,
}


# in-place forward rules for replay; each writes into the node's own buffer
def _fwo_affine(n):
    ins = n.inputs
    np.matmul(ins[0].value, ins[1].value, out=n.value)
    if len(ins) == 3:
        n.value += ins[2].value


def _fwo_concat(n):
    d = n.aux[0]
    n.value[:, :d] = n.inputs[0].value
    n.value[:, d:] = n.inputs[1].value


def _scalar_out(f):
    def rule(n):
        n.value = f(n.inputs[0].value)
    return rule


_FWD_OUT = {
    "add": lambda n: np.add(n.inputs[0].value, n.inputs[1].value, out=n.value),
    "sub": lambda n: np.subtract(n.inputs[0].value, n.inputs[1].value, out=n.value),
    "mul": lambda n: np.multiply(n.inputs[0].value, n.inputs[1].value, out=n.value),
    "neg": lambda n: np.negative(n.inputs[0].value, out=n.value),
    "cadd": lambda n: np.add(n.inputs[0].value, n.aux, out=n.value),
    "cmul": lambda n: np.multiply(n.inputs[0].value, n.aux, out=n.value),
    "tanh": lambda n: np.tanh(n.inputs[0].value, out=n.value),
    "sin": lambda n: np.sin(n.inputs[0].value, out=n.value),
    "cos": lambda n: np.cos(n.inputs[0].value, out=n.value),
    "exp": lambda n: np.exp(n.inputs[0].value, out=n.value),
    "square": lambda n: np.multiply(n.inputs[0].value, n.inputs[0].value, out=n.value),
    "sum": _scalar_out(np.sum),
    "mean": _scalar_out(np.mean),
    "rowsum": lambda n: np.sum(n.inputs[0].value, axis=1, keepdims=True, out=n.value),
    "concat": _fwo_concat,
    "slice": lambda n: np.copyto(n.value, n.inputs[0].value[:, n.aux[0]:n.aux[1]]),
    "gather": lambda n: np.take(n.inputs[0].value, n.aux[0], axis=0, out=n.value),
    "affine": _fwo_affine,
}


class Tape:
    """Topologically ordered record of primitives applied to leaf arrays.

    Single-writer while recording; ``gradient``/``hvp``/``replay`` may be
    called repeatedly afterwards.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    # -- construction -------------------------------------------------------

    def leaf(self, value, requires_grad: bool = False) -> Node:
        n = Node(None, (), _as_f64(value), None, requires_grad, len(self.nodes))
        self.nodes.append(n)
        return n

    def param_leaves(self, params: "ParamVector") -> dict[str, Node]:
        """One trainable leaf per layer of ``params``, keyed by layer name."""
        return {name: self.leaf(params[name], requires_grad=True) for name in params.names}

    def _push(self, op, inputs, aux=None) -> Node:
        rg = any(i.requires_grad for i in inputs)
        n = Node(op, tuple(inputs), None, aux, rg, len(self.nodes))
        v = _FWD[op](n)
        n.value = v if isinstance(v, np.ndarray) else np.asarray(v)
        self.nodes.append(n)
        return n

    def _binary(self, op, a, b):
        if a.value.shape != b.value.shape:
            raise ValueError(f"{op}: shape mismatch {a.value.shape} vs {b.value.shape}")
        return self._push(op, (a, b))

    def add(self, a, b):
        return self._binary("add", a, b)

    def sub(self, a, b):
        return self._binary("sub", a, b)

    def mul(self, a, b):
        return self._binary("mul", a, b)

    def neg(self, a):
        return self._push("neg", (a,))

    def cadd(self, a, c: float):
        return self._push("cadd", (a,), float(c))

    def cmul(self, a, c: float):
        return self._push("cmul", (a,), float(c))

    def tanh(self, a):
        return self._push("tanh", (a,))

    def sin(self, a):
        return self._push("sin", (a,))

    def cos(self, a):
        return self._push("cos", (a,))

    def exp(self, a):
        return self._push("exp", (a,))

    def square(self, a):
        return self._push("square", (a,))

    def sum(self, a):
        return self._push("sum", (a,))

    def mean(self, a):
        return self._push("mean", (a,))

    def rowsum(self, a):
        if a.value.ndim != 2:
            raise ValueError("rowsum expects a 2-D batch")
        return self._push("rowsum", (a,))

    def concat(self, a, b):
        if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[0] != b.value.shape[0]:
            raise ValueError(f"concat: incompatible shapes {a.value.shape}, {b.value.shape}")
        return self._push("concat", (a, b), (a.value.shape[1],))

    def slice_cols(self, a, lo: int, hi: int):
        if a.value.ndim != 2 or not (0 <= lo <= hi <= a.value.shape[1]):
            raise ValueError(f"slice: bad bounds [{lo}:{hi}] for shape {a.value.shape}")
        return self._push("slice", (a,), (lo, hi))

    def gather(self, a, idx) -> Node:
        """Row selection a[idx]; the backward pass scatter-adds per row.

        Useful when a batch repeats a small set of rows (e.g. shared
        initial conditions): compute once, gather per sample. The index
        plan sits in the node's aux and may be swapped (same length)
        between replays.
        """
        idx = np.asarray(idx, dtype=np.int64)
        if a.value.ndim != 2 or idx.ndim != 1:
            raise ValueError("gather expects a 2-D source and 1-D row indices")
        if idx.size == 0 or idx.min() < 0 or idx.max() >= a.value.shape[0]:
            raise ValueError("gather indices out of range")
        return self._push("gather", (a,), gather_plan(idx))

    def affine(self, x, w, b=None):
        if x.value.ndim != 2 or w.value.ndim != 2 or x.value.shape[1] != w.value.shape[0]:
            raise ValueError(f"affine: {x.value.shape} @ {w.value.shape}")
        if b is not None and b.value.shape != (w.value.shape[1],):
            raise ValueError(f"affine: bias shape {b.value.shape} != ({w.value.shape[1]},)")
        ins = (x, w) if b is None else (x, w, b)
        return self._push("affine", ins)

    # -- reverse mode -------------------------------------------------------

    def gradient(self, loss: Node, leaves) -> list[np.ndarray]:
        """Exact reverse-mode gradient of a recorded scalar w.r.t. leaves.

        Leaves the loss does not depend on get exact zeros. Deterministic:
        accumulation order is fixed by the tape order. Returned arrays are
        copies (internal buffers are reused between calls).
        """
        if loss.value.ndim != 0:
            raise ValueError("gradient target must be a recorded scalar")
        for n in self.nodes:
            n.grad = None
        loss.grad = np.ones((), dtype=np.float64)
        for i in range(loss.idx, -1, -1):
            n = self.nodes[i]
            if n.grad is None or n.op is None:
                continue
            _VJP[n.op](n)
        return [lf.grad.copy() if lf.grad is not None else np.zeros_like(lf.value)
                for lf in leaves]

    # -- forward tangents + forward-over-reverse ----------------------------

    def _forward_tangents(self, upto: int, seeds: dict[Node, np.ndarray]):
        for i in range(upto + 1):
            n = self.nodes[i]
            if n.op is None:
                n.dot = seeds.get(n)
            else:
                n.dot = _JVP[n.op](n)

    def hvp(self, loss: Node, leaves, tangents) -> list[np.ndarray]:
        """Hessian-vector product d/de grad(loss)(theta + e*v) at e=0.

        ``tangents`` pairs with ``leaves``; the recorded tape is reused, so
        repeated products against the same loss are cheap.
        """
        if loss.value.ndim != 0:
            raise ValueError("hvp target must be a recorded scalar")
        seeds = {}
        for lf, t in zip(leaves, tangents):
            t = _as_f64(t)
            if t.shape != lf.value.shape:
                raise ValueError(f"hvp: tangent shape {t.shape} != leaf {lf.value.shape}")
            seeds[lf] = t
        self._forward_tangents(loss.idx, seeds)
        for n in self.nodes:
            n.grad = None
            n.grad_dot = None
        loss.grad = np.ones((), dtype=np.float64)
        loss.grad_dot = np.zeros((), dtype=np.float64)
        for i in range(loss.idx, -1, -1):
            n = self.nodes[i]
            if n.grad is None or n.op is None:
                continue
            _VJP_DUAL[n.op](n)
        out = []
        for lf in leaves:
            out.append(lf.grad_dot if lf.grad_dot is not None else np.zeros_like(lf.value))
        return out

    # -- replay -------------------------------------------------------------

    def replay(self, target: Node, leaf_values: dict[Node, np.ndarray]) -> np.ndarray:
        """Recompute ``target`` after substituting leaf values.

        Op nodes write into their recorded buffers, so a replay allocates
        (almost) nothing. Leaf values that alias externally updated storage
        (e.g. optimizer-owned parameters) are picked up automatically.
        """
        for lf, v in leaf_values.items():
            v = _as_f64(v)
            if v.shape != lf.value.shape:
                raise ValueError("replay: leaf shape mismatch")
            lf.value = v
        for i in range(target.idx + 1):
            n = self.nodes[i]
            if n.op is not None:
                _FWD_OUT[n.op](n)
        return target.value


# ---------------------------------------------------------------------------
# reverse-mode accumulation into per-node reusable buffers
#
# The first contribution to a node writes into its cached gradient buffer;
# later contributions compute into a cached scratch buffer and add in place.
# Buffers are node-owned, so nothing aliases across nodes.


def _target(n):
    if n.gbuf is None or n.gbuf.shape != n.value.shape:
        n.gbuf = np.empty_like(n.value)
    n.grad = n.gbuf
    return n.gbuf


def _scratch(n):
    if n.gscratch is None or n.gscratch.shape != n.value.shape:
        n.gscratch = np.empty_like(n.value)
    return n.gscratch


def _acc_mul(n, a, b):
    """Accumulate a*b."""
    if not n.requires_grad:
        return
    if n.grad is None:
        np.multiply(a, b, out=_target(n))
    else:
        tmp = _scratch(n)
        np.multiply(a, b, out=tmp)
        n.grad += tmp


def _acc_copy(n, g):
    """Accumulate a broadcastable array as-is."""
    if not n.requires_grad:
        return
    if n.grad is None:
        np.copyto(_target(n), g)
    else:
        n.grad += g


def _vjp_add(n):
    _acc_copy(n.inputs[0], n.grad)
    _acc_copy(n.inputs[1], n.grad)


def _vjp_sub(n):
    a, b = n.inputs
    _acc_copy(a, n.grad)
    if not b.requires_grad:
        return
    if b.grad is None:
        np.negative(n.grad, out=_target(b))
    else:
        b.grad -= n.grad


def _vjp_mul(n):
    a, b = n.inputs
    _acc_mul(a, n.grad, b.value)
    _acc_mul(b, n.grad, a.value)


def _vjp_neg(n):
    b = n.inputs[0]
    if not b.requires_grad:
        return
    if b.grad is None:
        np.negative(n.grad, out=_target(b))
    else:
        b.grad -= n.grad


def _vjp_cadd(n):
    _acc_copy(n.inputs[0], n.grad)


def _vjp_cmul(n):
    _acc_mul(n.inputs[0], n.grad, n.aux)


def _vjp_tanh(n):
    # g * (1 - y^2), staged in place
    x = n.inputs[0]
    if not x.requires_grad:
        return
    if x.grad is None:
        out = _target(x)
    else:
        out = _scratch(x)
    np.multiply(n.value, n.value, out=out)
    np.subtract(1.0, out, out=out)
    out *= n.grad
    if out is not x.grad and x.grad is not None:
        x.grad += out


def _vjp_sin(n):
    x = n.inputs[0]
    if not x.requires_grad:
        return
    out = _target(x) if x.grad is None else _scratch(x)
    np.cos(x.value, out=out)
    out *= n.grad
    if out is not x.grad and x.grad is not None:
        x.grad += out


def _vjp_cos(n):
    x = n.inputs[0]
    if not x.requires_grad:
        return
    out = _target(x) if x.grad is None else _scratch(x)
    np.sin(x.value, out=out)
    np.negative(out, out=out)
    out *= n.grad
    if out is not x.grad and x.grad is not None:
        x.grad += out


def _vjp_exp(n):
    _acc_mul(n.inputs[0], n.grad, n.value)


def _vjp_square(n):
    x = n.inputs[0]
    if not x.requires_grad:
        return
    out = _target(x) if x.grad is None else _scratch(x)
    np.multiply(n.grad, x.value, out=out)
    out *= 2.0
    if out is not x.grad and x.grad is not None:
        x.grad += out


def _vjp_sum(n):
    _acc_copy(n.inputs[0], n.grad)


def _vjp_mean(n):
    x = n.inputs[0]
    if not x.requires_grad:
        return
    if x.grad is None:
        out = _target(x)
        out.fill(float(n.grad) / x.value.size)
    else:
        x.grad += n.grad / x.value.size


def _vjp_rowsum(n):
    _acc_copy(n.inputs[0], n.grad)


def _vjp_concat(n):
    a, b = n.inputs
    d = n.aux[0]
    _acc_copy(a, n.grad[:, :d])
    _acc_copy(b, n.grad[:, d:])


def _vjp_slice(n):
    x = n.inputs[0]
    if not x.requires_grad:
        return
    lo, hi = n.aux
    if x.grad is None:
        out = _target(x)
        out.fill(0.0)
        out[:, lo:hi] = n.grad
    else:
        x.grad[:, lo:hi] += n.grad


def _vjp_gather(n):
    x = n.inputs[0]
    if not x.requires_grad:
        return
    idx, order, uniq, starts = n.aux
    rows = np.add.reduceat(n.grad[order], starts, axis=0)
    if x.grad is None:
        out = _target(x)
        out.fill(0.0)
        out[uniq] = rows
    else:
        x.grad[uniq] += rows


def _vjp_affine(n):
    ins = n.inputs
    x, w = ins[0], ins[1]
    g = n.grad
    if x.requires_grad:
        if x.grad is None:
            np.matmul(g, w.value.T, out=_target(x))
        else:
            x.grad += g @ w.value.T
    if w.requires_grad:
        if w.grad is None:
            np.matmul(x.value.T, g, out=_target(w))
        else:
            w.grad += x.value.T @ g
    if len(ins) == 3 and ins[2].requires_grad:
        b = ins[2]
        if b.grad is None:
            g.sum(axis=0, out=_target(b))
        else:
            b.grad += g.sum(axis=0)


_VJP = {
    "add": _vjp_add, "sub": _vjp_sub, "mul": _vjp_mul, "neg": _vjp_neg,
    "cadd": _vjp_cadd, "cmul": _vjp_cmul, "tanh": _vjp_tanh, "sin": _vjp_sin,
    "cos": _vjp_cos, "exp": _vjp_exp, "square": _vjp_square, "sum": _vjp_sum,
    "mean": _vjp_mean, "rowsum": _vjp_rowsum, "concat": _vjp_concat,
    "slice": _vjp_slice, "gather": _vjp_gather, "affine": _vjp_affine,
}


# ---------------------------------------------------------------------------
# forward tangent rules (arrays, None = exact zero)


def _jvp_add(n):
    da, db = n.inputs[0].dot, n.inputs[1].dot
    if da is None:
        return None if db is None else db
    return da if db is None else da + db


def _jvp_sub(n):
    da, db = n.inputs[0].dot, n.inputs[1].dot
    if da is None:
        return None if db is None else -db
    return da if db is None else da - db


def _jvp_mul(n):
    a, b = n.inputs
    out = None
    if a.dot is not None:
        out = a.dot * b.value
    if b.dot is not None:
        t = a.value * b.dot
        out = t if out is None else out + t
    return out


def _jvp_affine(n):
    ins = n.inputs
    x, w = ins[0], ins[1]
    out = None
    if x.dot is not None:
        out = x.dot @ w.value
    if w.dot is not None:
        t = x.value @ w.dot
        out = t if out is None else out + t
    if len(ins) == 3 and ins[2].dot is not None:
        out = ins[2].dot + (0.0 if out is None else out)
        if out.shape != n.value.shape:
            out = np.broadcast_to(out, n.value.shape).copy()
    return out


def _jvp_unary(f):
    def rule(n):
        d = n.inputs[0].dot
        return None if d is None else f(n, d)
    return rule


def _jvp_concat(n):
    a, b = n.inputs
    if a.dot is None and b.dot is None:
        return None
    da = a.dot if a.dot is not None else np.zeros_like(a.value)
    db = b.dot if b.dot is not None else np.zeros_like(b.value)
    return np.concatenate((da, db), axis=1)


_JVP = {
    "add": _jvp_add,
    "sub": _jvp_sub,
    "mul": _jvp_mul,
    "neg": _jvp_unary(lambda n, d: -d),
    "cadd": _jvp_unary(lambda n, d: d),
    "cmul": _jvp_unary(lambda n, d: d * n.aux),
    "tanh": _jvp_unary(lambda n, d: d * (1.0 - n.value * n.value)),
    "sin": _jvp_unary(lambda n, d: d * np.cos(n.inputs[0].value)),
    "cos": _jvp_unary(lambda n, d: -d * np.sin(n.inputs[0].value)),
    "exp": _jvp_unary(lambda n, d: d * n.value),
    "square": _jvp_unary(lambda n, d: 2.0 * d * n.inputs[0].value),
    "sum": _jvp_unary(lambda n, d: np.sum(d)),
    "mean": _jvp_unary(lambda n, d: np.mean(d)),
    "rowsum": _jvp_unary(lambda n, d: np.sum(d, axis=1, keepdims=True)),
    "concat": _jvp_concat,
    "slice": _jvp_unary(lambda n, d: d[:, n.aux[0]:n.aux[1]]),
    "gather": _jvp_unary(lambda n, d: d[n.aux[0]]),
    "affine": _jvp_affine,
}


# ---------------------------------------------------------------------------
# dual (value, tangent) reverse accumulation for forward-over-reverse


def _acc2(n, g, gd):
    if gd is None:
        gd = np.zeros(g.shape, dtype=np.float64)
    if n.grad is None:
        shp = n.value.shape
        n.grad = g if g.shape == shp else np.broadcast_to(g, shp).copy()
        n.grad_dot = gd if gd.shape == shp else np.broadcast_to(gd, shp).copy()
    else:
        n.grad = n.grad + g
        n.grad_dot = n.grad_dot + gd


def _vd_add(n):
    a, b = n.inputs
    _acc2(a, n.grad, n.grad_dot)
    _acc2(b, n.grad.copy(), n.grad_dot.copy())


def _vd_sub(n):
    a, b = n.inputs
    _acc2(a, n.grad, n.grad_dot)
    _acc2(b, -n.grad, -n.grad_dot)


def _vd_mul(n):
    a, b = n.inputs
    g, gd = n.grad, n.grad_dot
    ta = gd * b.value
    if b.dot is not None:
        ta = ta + g * b.dot
    tb = gd * a.value
    if a.dot is not None:
        tb = tb + g * a.dot
    _acc2(a, g * b.value, ta)
    _acc2(b, g * a.value, tb)


def _vd_neg(n):
    _acc2(n.inputs[0], -n.grad, -n.grad_dot)


def _vd_cadd(n):
    _acc2(n.inputs[0], n.grad.copy(), n.grad_dot.copy())


def _vd_cmul(n):
    _acc2(n.inputs[0], n.grad * n.aux, n.grad_dot * n.aux)


def _vd_tanh(n):
    x = n.inputs[0]
    u = 1.0 - n.value * n.value
    g, gd = n.grad, n.grad_dot
    dy = n.dot
    t = gd * u if dy is None else gd * u - 2.0 * g * n.value * dy
    _acc2(x, g * u, t)


def _vd_sin(n):
    x = n.inputs[0]
    c = np.cos(x.value)
    t = n.grad_dot * c if x.dot is None else n.grad_dot * c - n.grad * n.value * x.dot
    _acc2(x, n.grad * c, t)


def _vd_cos(n):
    x = n.inputs[0]
    s = np.sin(x.value)
    t = -n.grad_dot * s if x.dot is None else -n.grad_dot * s - n.grad * n.value * x.dot
    _acc2(x, -n.grad * s, t)


def _vd_exp(n):
    x = n.inputs[0]
    dy = n.dot
    t = n.grad_dot * n.value if dy is None else n.grad_dot * n.value + n.grad * dy
    _acc2(x, n.grad * n.value, t)


def _vd_square(n):
    x = n.inputs[0]
    t = n.grad_dot * x.value if x.dot is None else n.grad_dot * x.value + n.grad * x.dot
    _acc2(x, 2.0 * n.grad * x.value, 2.0 * t)


def _vd_sum(n):
    _acc2(n.inputs[0], n.grad, n.grad_dot)


def _vd_mean(n):
    x = n.inputs[0]
    k = x.value.size
    _acc2(x, n.grad / k, n.grad_dot / k)


def _vd_rowsum(n):
    _acc2(n.inputs[0], n.grad, n.grad_dot)


def _vd_concat(n):
    a, b = n.inputs
    d = n.aux[0]
    _acc2(a, n.grad[:, :d].copy(), n.grad_dot[:, :d].copy())
    _acc2(b, n.grad[:, d:].copy(), n.grad_dot[:, d:].copy())


def _vd_slice(n):
    x = n.inputs[0]
    lo, hi = n.aux
    g = np.zeros_like(x.value)
    g[:, lo:hi] = n.grad
    gd = np.zeros_like(x.value)
    gd[:, lo:hi] = n.grad_dot
    _acc2(x, g, gd)


def _vd_gather(n):
    x = n.inputs[0]
    idx, order, uniq, starts = n.aux
    g = np.zeros_like(x.value)
    g[uniq] = np.add.reduceat(n.grad[order], starts, axis=0)
    gd = np.zeros_like(x.value)
    gd[uniq] = np.add.reduceat(n.grad_dot[order], starts, axis=0)
    _acc2(x, g, gd)


def _vd_affine(n):
    ins = n.inputs
    x, w = ins[0], ins[1]
    g, gd = n.grad, n.grad_dot
    if x.requires_grad:
        t = gd @ w.value.T
        if w.dot is not None:
            t = t + g @ w.dot.T
        _acc2(x, g @ w.value.T, t)
    if w.requires_grad:
        t = x.value.T @ gd
        if x.dot is not None:
            t = t + x.dot.T @ g
        _acc2(w, x.value.T @ g, t)
    if len(ins) == 3 and ins[2].requires_grad:
        _acc2(ins[2], g.sum(axis=0), gd.sum(axis=0))


_VJP_DUAL = {
    "add": _vd_add, "sub": _vd_sub, "mul": _vd_mul, "neg": _vd_neg,
    "cadd": _vd_cadd, "cmul": _vd_cmul, "tanh": _vd_tanh, "sin": _vd_sin,
    "cos": _vd_cos, "exp": _vd_exp, "square": _vd_square, "sum": _vd_sum,
    "mean": _vd_mean, "rowsum": _vd_rowsum, "concat": _vd_concat,
    "slice": _vd_slice, "gather": _vd_gather, "affine": _vd_affine,
}


# ---------------------------------------------------------------------------
# forward mode on the tape: dual pairs of nodes


@dataclass
class Dual:
    """Pair of tape nodes (value, tangent); ``d=None`` means zero tangent.

    Tangent computations are emitted as tape primitives, so any loss built
    from a tangent can itself be differentiated in reverse mode.
    """

    v: Node
    d: Node | None = None


def dadd(t: Tape, a: Dual, b: Dual) -> Dual:
    v = t.add(a.v, b.v)
    if a.d is None:
        return Dual(v, b.d)
    return Dual(v, a.d if b.d is None else t.add(a.d, b.d))


def dsub(t: Tape, a: Dual, b: Dual) -> Dual:
    v = t.sub(a.v, b.v)
    if b.d is None:
        return Dual(v, a.d)
    return Dual(v, t.neg(b.d) if a.d is None else t.sub(a.d, b.d))


def dmul(t: Tape, a: Dual, b: Dual) -> Dual:
    v = t.mul(a.v, b.v)
    d = None
    if a.d is not None:
        d = t.mul(a.d, b.v)
    if b.d is not None:
        t2 = t.mul(a.v, b.d)
        d = t2 if d is None else t.add(d, t2)
    return Dual(v, d)


def dneg(t: Tape, a: Dual) -> Dual:
    return Dual(t.neg(a.v), None if a.d is None else t.neg(a.d))


def dcadd(t: Tape, a: Dual, c: float) -> Dual:
    return Dual(t.cadd(a.v, c), a.d)


def dcmul(t: Tape, a: Dual, c: float) -> Dual:
    return Dual(t.cmul(a.v, c), None if a.d is None else t.cmul(a.d, c))


def dtanh(t: Tape, a: Dual) -> Dual:
    v = t.tanh(a.v)
    if a.d is None:
        return Dual(v, None)
    one_minus_sq = t.cadd(t.neg(t.square(v)), 1.0)
    return Dual(v, t.mul(a.d, one_minus_sq))


def dsin(t: Tape, a: Dual) -> Dual:
    v = t.sin(a.v)
    return Dual(v, None if a.d is None else t.mul(a.d, t.cos(a.v)))


def dcos(t: Tape, a: Dual) -> Dual:
    v = t.cos(a.v)
    return Dual(v, None if a.d is None else t.neg(t.mul(a.d, t.sin(a.v))))


def dexp(t: Tape, a: Dual) -> Dual:
    v = t.exp(a.v)
    return Dual(v, None if a.d is None else t.mul(a.d, v))


def dsquare(t: Tape, a: Dual) -> Dual:
    v = t.square(a.v)
    return Dual(v, None if a.d is None else t.cmul(t.mul(a.d, a.v), 2.0))


def daffine(t: Tape, x: Dual, w: Node, b: Node | None = None) -> Dual:
    v = t.affine(x.v, w, b)
    return Dual(v, None if x.d is None else t.affine(x.d, w))


def dconcat(t: Tape, a: Dual, b: Dual) -> Dual:
    v = t.concat(a.v, b.v)
    if a.d is None and b.d is None:
        return Dual(v, None)
    da = a.d if a.d is not None else t.leaf(np.zeros(a.v.value.shape))
    db = b.d if b.d is not None else t.leaf(np.zeros(b.v.value.shape))
    return Dual(v, t.concat(da, db))


def dslice_cols(t: Tape, a: Dual, lo: int, hi: int) -> Dual:
    v = t.slice_cols(a.v, lo, hi)
    return Dual(v, None if a.d is None else t.slice_cols(a.d, lo, hi))


def drowsum(t: Tape, a: Dual) -> Dual:
    v = t.rowsum(a.v)
    return Dual(v, None if a.d is None else t.rowsum(a.d))


def dgather(t: Tape, a: Dual, idx) -> Dual:
    v = t.gather(a.v, idx)
    return Dual(v, None if a.d is None else t.gather(a.d, idx))


def input_derivative(net_eval, t_value: float) -> float:
    """Forward-mode derivative of a scalar-input evaluation at ``t_value``.

    ``net_eval(tape, dual)`` must build its output from the tape primitives;
    anything else is unsupported and fails at the call site.
    """
    tape = Tape()
    tv = tape.leaf(np.array([[float(t_value)]]))
    td = tape.leaf(np.ones((1, 1)))
    out = net_eval(tape, Dual(tv, td))
    if out.d is None:
        return 0.0
    return float(np.asarray(out.d.value).reshape(()))


# ---------------------------------------------------------------------------
# flattened, layer-indexed parameter storage


class ParamVector:
    """Layered parameter storage with a contiguous flat float64 view.

    Layer ``i`` occupies ``flat[offsets[i]:offsets[i]+sizes[i]]`` reshaped
    to ``shapes[i]``; views alias the flat buffer, so in-place updates to
    ``flat`` are visible through the layer views and vice versa.
    """

    __slots__ = ("names", "shapes", "offsets", "sizes", "flat")

    def __init__(self, names, shapes, flat):
        self.names = list(names)
        self.shapes = [tuple(s) for s in shapes]
        self.sizes = [int(np.prod(s, dtype=np.int64)) for s in self.shapes]
        self.offsets = list(np.concatenate(([0], np.cumsum(self.sizes)))[:-1])
        flat = _as_f64(flat)
        if flat.ndim != 1 or flat.size != sum(self.sizes):
            raise ValueError(f"flat length {flat.size} != total layer size {sum(self.sizes)}")
        if len(set(self.names)) != len(self.names):
            raise ValueError("duplicate layer names")
        self.flat = flat

    @classmethod
    def from_arrays(cls, named_arrays) -> "ParamVector":
        names = [n for n, _ in named_arrays]
        shapes = [np.asarray(a).shape for _, a in named_arrays]
        flat = np.concatenate([_as_f64(a).ravel() for _, a in named_arrays]) \
            if named_arrays else np.zeros(0)
        return cls(names, shapes, flat)

    @property
    def n(self) -> int:
        return self.flat.size

    def view(self, i: int) -> np.ndarray:
        o, s = self.offsets[i], self.sizes[i]
        return self.flat[o:o + s].reshape(self.shapes[i])

    def __getitem__(self, name: str) -> np.ndarray:
        return self.view(self.names.index(name))

    def __len__(self):
        return len(self.names)

    def layer_arrays(self) -> list[np.ndarray]:
        return [self.view(i) for i in range(len(self.names))]

    def like(self, flat: np.ndarray) -> "ParamVector":
        return ParamVector(self.names, self.shapes, flat)

    def copy(self) -> "ParamVector":
        return self.like(self.flat.copy())

    def zeros_like(self) -> "ParamVector":
        return self.like(np.zeros_like(self.flat))

    def flatten_layers(self, arrays) -> np.ndarray:
        """Concatenate per-layer arrays (e.g. gradients) into flat order."""
        if len(arrays) != len(self.names):
            raise ValueError("layer count mismatch")
        for a, s in zip(arrays, self.shapes):
            if np.asarray(a).shape != s:
                raise ValueError("layer shape mismatch")
        return np.concatenate([_as_f64(a).ravel() for a in arrays]) \
            if arrays else np.zeros(0)


def grad(loss_fn, params: ParamVector) -> np.ndarray:
    """Flat reverse-mode gradient of ``loss_fn(tape, leaves) -> Node``."""
    tape = Tape()
    leaves = tape.param_leaves(params)
    loss = loss_fn(tape, leaves)
    gs = tape.gradient(loss, list(leaves.values()))
    return params.flatten_layers(gs)


def hvp(loss_fn, params: ParamVector, v: np.ndarray) -> np.ndarray:
    """Flat Hessian-vector product of ``loss_fn`` at ``params`` against ``v``."""
    return HvpOperator(loss_fn, params).apply(v)


class HvpOperator:
    """Records the loss once and serves repeated Hessian-vector products."""

    def __init__(self, loss_fn, params: ParamVector):
        self.params = params
        self.tape = Tape()
        self._leaves = self.tape.param_leaves(params)
        self.loss = loss_fn(self.tape, self._leaves)
        if self.loss.value.ndim != 0:
            raise ValueError("loss_fn must return a recorded scalar")

    @property
    def loss_value(self) -> float:
        return float(self.loss.value)

    def apply(self, v: np.ndarray) -> np.ndarray:
        v = _as_f64(v)
        if v.shape != (self.params.n,):
            raise ValueError(f"hvp vector shape {v.shape} != ({self.params.n},)")
        pv = self.params.like(v)
        outs = self.tape.hvp(self.loss, list(self._leaves.values()), pv.layer_arrays())
        return self.params.flatten_layers(outs)

    def gradient(self) -> np.ndarray:
        gs = self.tape.gradient(self.loss, list(self._leaves.values()))
        return self.params.flatten_layers(gs)

    def loss_at(self, flat: np.ndarray) -> float:
        """Replay the recorded tape at substituted parameter values."""
        pv = self.params.like(_as_f64(flat))
        updates = {node: pv[name] for name, node in self._leaves.items()}
        return float(self.tape.replay(self.loss, updates))
