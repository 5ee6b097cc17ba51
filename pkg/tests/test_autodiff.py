import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bowsim import autodiff as ad
from bowsim import fdm, nets, train
from util import fd_gradient, max_rel_err, random_graph_loss


def quad_loss(tape, leaves):
    return tape.cmul(tape.sum(tape.square(leaves["w"])), 0.5)


def make_quad_params(n=7):
    return ad.ParamVector.from_arrays([("w", np.arange(1.0, n + 1.0)[None, :])])


def test_grad_of_quadratic_is_theta():
    params = make_quad_params()
    g = ad.grad(quad_loss, params)
    assert np.array_equal(g, params.flat)


def test_grad_dead_block_exactly_zero():
    params = ad.ParamVector.from_arrays([
        ("w", np.arange(1.0, 4.0)[None, :]),
        ("dead", np.full((2, 2), 3.0)),
    ])
    g = ad.grad(quad_loss, params)
    assert np.array_equal(g[3:], np.zeros(4))
    assert np.array_equal(g[:3], params.flat[:3])


def test_gradient_rejects_non_scalar():
    tape = ad.Tape()
    w = tape.leaf(np.ones((2, 2)), requires_grad=True)
    y = tape.square(w)
    with pytest.raises(ValueError):
        tape.gradient(y, [w])


@pytest.mark.parametrize("seed", range(30))
def test_random_graph_grad_matches_fd(seed):
    loss_fn, params = random_graph_loss(seed)
    g = ad.grad(loss_fn, params)
    fd = fd_gradient(loss_fn, params)
    assert max_rel_err(g, fd, floor=1e-3) < 1e-6


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=1000, max_value=100000))
def test_random_graph_grad_matches_fd_property(seed):
    loss_fn, params = random_graph_loss(seed)
    g = ad.grad(loss_fn, params)
    fd = fd_gradient(loss_fn, params)
    assert max_rel_err(g, fd, floor=1e-3) < 1e-6


def test_rerecording_same_graph_is_bitwise_identical():
    loss_fn, params = random_graph_loss(5)
    g1 = ad.grad(loss_fn, params)
    g2 = ad.grad(loss_fn, params)
    assert np.array_equal(g1, g2)


def test_rerunning_same_tape_is_bitwise_identical():
    loss_fn, params = random_graph_loss(6)
    tape = ad.Tape()
    leaves = tape.param_leaves(params)
    loss = loss_fn(tape, leaves)
    g1 = tape.gradient(loss, list(leaves.values()))
    g2 = tape.gradient(loss, list(leaves.values()))
    for a, b in zip(g1, g2):
        assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# forward mode


def test_input_derivative_sine():
    omega = 17.0

    def f(tape, t):
        return ad.dsin(tape, ad.dcmul(tape, t, omega))

    for t0 in (0.0, 0.1, 0.7):
        assert ad.input_derivative(f, t0) == pytest.approx(
            omega * np.cos(omega * t0), rel=1e-12)


def test_input_derivative_constant_is_zero():
    def f(tape, t):
        return ad.Dual(tape.leaf(np.array([[4.2]])))

    assert ad.input_derivative(f, 0.3) == 0.0


def test_input_derivative_pinn_head_matches_fd():
    model = nets.PinnModel.create(width=8, depth=2, c_rff=4, sigma_prime=1.0,
                                  scale_t=0.02, scale_pq=0.2, seed=7)

    def f(tape, t):
        leaves = tape.param_leaves(model.params)
        p, _ = nets.pinn_eval_dual(tape, model, leaves, t)
        return p

    t0, h = 0.01, 1e-7
    fd = (nets.pinn_eval(model, t0 + h)[0][0] - nets.pinn_eval(model, t0 - h)[0][0]) / (2 * h)
    assert ad.input_derivative(f, t0) == pytest.approx(fd, rel=1e-6)


# ---------------------------------------------------------------------------
# Hessian-vector products


def test_hvp_identity_hessian():
    params = make_quad_params()
    v = np.linspace(-1, 1, params.n)
    assert np.allclose(ad.hvp(quad_loss, params, v), v, atol=1e-14)


def test_hvp_dense_symmetric_oracle():
    rng = np.random.default_rng(0)
    n = 20
    a_mat = rng.normal(size=(n, n))
    a_mat = 0.5 * (a_mat + a_mat.T)
    params = ad.ParamVector.from_arrays([("w", rng.normal(size=(1, n)))])

    def loss_fn(tape, leaves):
        w = leaves["w"]
        y = tape.affine(w, tape.leaf(a_mat))
        return tape.cmul(tape.sum(tape.mul(w, y)), 0.5)

    op = ad.HvpOperator(loss_fn, params)
    for _ in range(4):
        v = rng.normal(size=n)
        assert np.allclose(op.apply(v), a_mat @ v, atol=1e-10)


def test_hvp_matches_fd_of_gradients_on_pinn_loss():
    model = nets.PinnModel.create(width=8, depth=2, c_rff=4, sigma_prime=1.0,
                                  scale_t=0.02, scale_pq=0.2, seed=1)
    cfg = fdm.OscillatorConfig(f=100.0, F_B=10.0, v_B=0.2)
    rng = np.random.default_rng(3)
    t_c = np.sort(rng.uniform(0, 0.02, 12))
    ic = fdm.InitialCondition(0.0, 0.0)

    def loss_fn(tape, leaves):
        nodes = train.record_pinn_losses(tape, model, leaves, cfg, t_c, ic)
        return train.record_total_loss(tape, nodes, train.LossWeights.manual())

    op = ad.HvpOperator(loss_fn, model.params)
    v = rng.standard_normal(model.params.n)
    h = 1e-5
    base = model.params.flat.copy()
    model.params.flat[:] = base + h * v
    gp = ad.grad(loss_fn, model.params)
    model.params.flat[:] = base - h * v
    gm = ad.grad(loss_fn, model.params)
    model.params.flat[:] = base
    fd = (gp - gm) / (2 * h)
    hv = op.apply(v)
    assert np.linalg.norm(hv - fd) / np.linalg.norm(fd) < 1e-4


def test_hvp_symmetry():
    loss_fn, params = random_graph_loss(11)
    op = ad.HvpOperator(loss_fn, params)
    rng = np.random.default_rng(2)
    u = rng.standard_normal(params.n)
    v = rng.standard_normal(params.n)
    lhs = u @ op.apply(v)
    rhs = v @ op.apply(u)
    assert lhs == pytest.approx(rhs, rel=1e-8)


def test_hvp_linear_in_v():
    loss_fn, params = random_graph_loss(12)
    op = ad.HvpOperator(loss_fn, params)
    rng = np.random.default_rng(4)
    v1 = rng.standard_normal(params.n)
    v2 = rng.standard_normal(params.n)
    combo = op.apply(2.5 * v1 - 1.25 * v2)
    parts = 2.5 * op.apply(v1) - 1.25 * op.apply(v2)
    assert np.allclose(combo, parts, rtol=1e-12, atol=1e-12)


def test_hvp_shape_mismatch_rejected():
    params = make_quad_params()
    with pytest.raises(ValueError):
        ad.hvp(quad_loss, params, np.ones(params.n + 1))


# ---------------------------------------------------------------------------
# ParamVector and replay


def test_paramvector_layout_and_views():
    pv = ad.ParamVector.from_arrays([("a", np.ones((2, 3))), ("b", np.zeros(4))])
    assert pv.n == 10
    assert pv.offsets == [0, 6]
    pv["a"][0, 0] = 7.0
    assert pv.flat[0] == 7.0  # views alias the flat buffer
    pv.flat[6] = -1.0
    assert pv["b"][0] == -1.0


def test_paramvector_validation():
    with pytest.raises(ValueError):
        ad.ParamVector(["a", "a"], [(1,), (1,)], np.zeros(2))
    with pytest.raises(ValueError):
        ad.ParamVector(["a"], [(3,)], np.zeros(2))


def test_replay_matches_fresh_recording():
    loss_fn, params = random_graph_loss(3)
    op = ad.HvpOperator(loss_fn, params)
    rng = np.random.default_rng(8)
    for _ in range(3):
        new_flat = params.flat + rng.normal(0, 0.1, params.n)
        replayed = op.loss_at(new_flat)
        fresh = ad.HvpOperator(loss_fn, params.like(new_flat)).loss_value
        assert replayed == fresh


def test_gather_matches_one_hot_matmul_oracle():
    rng = np.random.default_rng(9)
    src = rng.normal(size=(4, 3))
    idx = np.array([2, 0, 2, 3, 1, 2])
    sel = np.zeros((idx.size, 4))
    sel[np.arange(idx.size), idx] = 1.0
    params = ad.ParamVector.from_arrays([("w", src)])

    def loss_gather(tape, leaves):
        g = tape.gather(leaves["w"], idx)
        return tape.mean(tape.square(g))

    def loss_matmul(tape, leaves):
        g = tape.affine(tape.leaf(sel), leaves["w"])
        return tape.mean(tape.square(g))

    assert ad.HvpOperator(loss_gather, params).loss_value == pytest.approx(
        ad.HvpOperator(loss_matmul, params).loss_value, rel=1e-15)
    g1 = ad.grad(loss_gather, params)
    g2 = ad.grad(loss_matmul, params)
    assert np.allclose(g1, g2, rtol=1e-12, atol=1e-15)
