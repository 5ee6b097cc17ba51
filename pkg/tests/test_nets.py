import numpy as np
import pytest

from bowsim import autodiff as ad
from bowsim import nets
from bowsim.autodiff import Dual, ParamVector, Tape
from bowsim.nets import (DeepOnetModel, ModifiedFcnn, PinnModel, RffEmbedding,
                         WindowWarning, deeponet_eval, deeponet_rollout,
                         fcnn_forward, load_checkpoint, pinn_eval,
                         pinn_predict, rff_embed, save_checkpoint)


def test_rff_zero_input():
    emb = RffEmbedding.create(1, 8, 1.0, seed=0)
    out = rff_embed(np.zeros(1), emb)
    assert out.shape == (16,)
    assert np.array_equal(out[:8], np.ones(8))   # cos block first
    assert np.array_equal(out[8:], np.zeros(8))


def test_rff_range_and_width():
    emb = RffEmbedding.create(2, 50, 1.0, seed=3)
    x = np.random.default_rng(0).normal(size=(40, 2))
    out = rff_embed(x, emb)
    assert out.shape == (40, 100)  # 2*c_rff lines up with the gated width
    assert np.all(out >= -1.0) and np.all(out <= 1.0)


def test_rff_same_seed_bitwise():
    a = RffEmbedding.create(1, 16, 2.0, seed=42)
    b = RffEmbedding.create(1, 16, 2.0, seed=42)
    assert np.array_equal(a.b_matrix, b.b_matrix)


def test_rff_dimension_mismatch():
    emb = RffEmbedding.create(2, 4, 1.0, seed=0)
    with pytest.raises(ValueError):
        rff_embed(np.zeros((3, 3)), emb)


def make_fcnn(width=6, depth=2, out=3, seed=0, prefix=""):
    net = ModifiedFcnn(width, width, depth, out, prefix=prefix)
    rng = np.random.default_rng(seed)
    params = nets.glorot_init(net.layer_specs(), rng)
    return net, params


def test_fcnn_zero_params_zero_output():
    net, params = make_fcnn()
    params.flat[:] = 0.0
    x = np.random.default_rng(1).normal(size=(5, 6))
    assert np.array_equal(fcnn_forward(net, params, x), np.zeros((5, 3)))


def test_fcnn_closed_gate_reduces_to_u_path():
    net, params = make_fcnn()
    for k in range(1, net.depth + 1):
        params[f"W_Z{k}"][...] = 0.0
        params[f"b_Z{k}"][...] = 0.0
    x = np.random.default_rng(2).normal(size=(4, 6))
    u = np.tanh(x @ params["W_U"] + params["b_U"])
    expected = u @ params["W_O"] + params["b_O"]
    assert np.allclose(fcnn_forward(net, params, x), expected, atol=1e-15)


def test_fcnn_paper_size_evaluates():
    net, params = make_fcnn(width=100, depth=4, out=1, seed=5)
    x = np.random.default_rng(3).normal(size=(1000, 100))
    out = fcnn_forward(net, params, x)
    assert out.shape == (1000, 1)
    assert np.all(np.isfinite(out))


def test_fcnn_linear_in_output_layer():
    net, params = make_fcnn()
    x = np.random.default_rng(4).normal(size=(3, 6))
    base = fcnn_forward(net, params, x)
    params["W_O"][...] *= 2.0
    params["b_O"][...] *= 2.0
    assert np.allclose(fcnn_forward(net, params, x), 2.0 * base, rtol=1e-15)


def test_fcnn_input_width_must_match_hidden():
    with pytest.raises(ValueError):
        ModifiedFcnn(4, 8, 2, 1)


def test_fcnn_dual_matches_plain_bitwise():
    net, params = make_fcnn(width=8, depth=3, out=2, seed=9)
    x = np.random.default_rng(5).normal(size=(7, 8))
    tape = Tape()
    leaves = tape.param_leaves(params)
    out = nets.fcnn_forward_dual(tape, net, leaves, Dual(tape.leaf(x)))
    assert np.array_equal(out.v.value, fcnn_forward(net, params, x))


def test_pinn_zero_heads_output_zero():
    model = PinnModel.create(width=8, depth=1, c_rff=4, sigma_prime=1.0,
                             scale_t=0.1, scale_pq=0.2, seed=0)
    model.params.flat[:] = 0.0
    p, q = pinn_eval(model, np.linspace(0, 0.1, 5))
    assert np.array_equal(p, np.zeros(5))
    assert np.array_equal(q, np.zeros(5))


def test_pinn_output_scaling_is_multiplicative():
    m1 = PinnModel.create(8, 1, 4, 1.0, 0.1, 0.2, seed=1)
    m2 = PinnModel.create(8, 1, 4, 1.0, 0.1, 0.4, seed=1)
    t = np.linspace(0, 0.1, 9)
    p1, q1 = pinn_eval(m1, t)
    p2, q2 = pinn_eval(m2, t)
    assert np.allclose(p2, 2.0 * p1, rtol=1e-15)
    assert np.allclose(q2, 2.0 * q1, rtol=1e-15)


def test_pinn_eval_deterministic_bitwise():
    model = PinnModel.create(8, 2, 4, 1.0, 0.1, 0.2, seed=2)
    t = np.linspace(0, 0.1, 11)
    p1, q1 = pinn_eval(model, t)
    p2, q2 = pinn_eval(model, t)
    assert np.array_equal(p1, p2) and np.array_equal(q1, q2)


def test_pinn_dual_matches_plain_bitwise():
    model = PinnModel.create(8, 2, 4, 1.0, 0.1, 0.2, seed=3)
    t = np.linspace(0, 0.1, 6)
    tape = Tape()
    leaves = tape.param_leaves(model.params)
    p, q = nets.pinn_eval_dual(tape, model, leaves,
                               Dual(tape.leaf(t[:, None])))
    p_np, q_np = pinn_eval(model, t)
    assert np.array_equal(p.v.value[:, 0], p_np)
    assert np.array_equal(q.v.value[:, 0], q_np)


def test_pinn_outside_window_warns():
    model = PinnModel.create(8, 1, 4, 1.0, 0.1, 0.2, seed=4)
    with pytest.warns(WindowWarning):
        pinn_eval(model, np.array([0.5]))


def test_pinn_derivative_matches_fd():
    model = PinnModel.create(8, 2, 4, 1.0, 0.02, 0.2, seed=8)
    t0, h = 0.013, 1e-7
    tape = Tape()
    leaves = tape.param_leaves(model.params)
    p, q = nets.pinn_eval_dual(tape, model, leaves,
                               Dual(tape.leaf(np.array([[t0]])),
                                    tape.leaf(np.ones((1, 1)))))
    fd_p = (pinn_eval(model, t0 + h)[0][0] - pinn_eval(model, t0 - h)[0][0]) / (2 * h)
    fd_q = (pinn_eval(model, t0 + h)[1][0] - pinn_eval(model, t0 - h)[1][0]) / (2 * h)
    assert p.d.value[0, 0] == pytest.approx(fd_p, rel=1e-6)
    assert q.d.value[0, 0] == pytest.approx(fd_q, rel=1e-6)


def test_deeponet_zero_trunk_gives_zero():
    model = DeepOnetModel.create(width=8, depth=1, c_rff=4, c_out=4,
                                 sigma_prime=1.0, scale_t=0.01, scale_pq=0.35, seed=0)
    for name in model.params.names:
        if name.startswith("trunk."):
            model.params[name][...] = 0.0
    t = np.linspace(0, 0.01, 6)
    ic = np.full((6, 2), 0.1)
    p, q = deeponet_eval(model, t, ic)
    assert np.array_equal(p, np.zeros(6))
    assert np.array_equal(q, np.zeros(6))


def test_deeponet_merge_split_widths():
    model = DeepOnetModel.create(width=8, depth=1, c_rff=4, c_out=200,
                                 sigma_prime=1.0, scale_t=0.01, scale_pq=0.35, seed=1)
    assert model.c_out // 2 == 100
    with pytest.raises(ValueError):
        DeepOnetModel.create(width=8, depth=1, c_rff=4, c_out=5,
                             sigma_prime=1.0, scale_t=0.01, scale_pq=0.35, seed=1)


def test_deeponet_no_cross_sample_coupling():
    model = DeepOnetModel.create(8, 2, 4, 6, 1.0, 0.01, 0.35, seed=2)
    rng = np.random.default_rng(0)
    t = rng.uniform(0, 0.01, 10)
    ic = rng.uniform(-0.3, 0.3, (10, 2))
    p, q = deeponet_eval(model, t, ic)
    perm = rng.permutation(10)
    p2, q2 = deeponet_eval(model, t[perm], ic[perm])
    assert np.array_equal(p2, p[perm])
    assert np.array_equal(q2, q[perm])


def test_deeponet_batch_mismatch_rejected():
    model = DeepOnetModel.create(8, 1, 4, 4, 1.0, 0.01, 0.35, seed=3)
    with pytest.raises(ValueError):
        deeponet_eval(model, np.zeros(3), np.zeros((4, 2)))


def test_deeponet_dual_matches_plain_bitwise():
    model = DeepOnetModel.create(8, 2, 4, 6, 1.0, 0.01, 0.35, seed=5)
    rng = np.random.default_rng(1)
    t = rng.uniform(0, 0.01, 7)
    ic = rng.uniform(-0.3, 0.3, (7, 2))
    tape = Tape()
    leaves = tape.param_leaves(model.params)
    p, q = nets.deeponet_eval_dual(tape, model, leaves,
                                   Dual(tape.leaf(t[:, None])), tape.leaf(ic))
    p_np, q_np = deeponet_eval(model, t, ic)
    assert np.array_equal(p.v.value[:, 0], p_np)
    assert np.array_equal(q.v.value[:, 0], q_np)


def test_rollout_first_window_equals_direct_eval():
    model = DeepOnetModel.create(8, 1, 4, 4, 1.0, 0.01, 0.35, seed=6)
    t = np.linspace(0, 0.0099, 8)
    ic = (0.1, -0.2)
    p_direct, q_direct = deeponet_eval(model, t, np.broadcast_to(ic, (8, 2)).copy())
    p_roll, q_roll = deeponet_rollout(model, ic, t)
    assert np.array_equal(p_roll, p_direct)
    assert np.array_equal(q_roll, q_direct)


def test_rollout_chains_through_window_boundaries():
    model = DeepOnetModel.create(8, 1, 4, 4, 1.0, 0.01, 0.35, seed=7)
    ic = (0.05, 0.15)
    p1, q1 = deeponet_eval(model, np.array([0.01]), np.asarray(ic)[None, :])
    t = np.array([0.012])
    p, q = deeponet_rollout(model, ic, t)
    p_direct, q_direct = deeponet_eval(model, np.array([0.002]),
                                       np.array([[p1[0], q1[0]]]))
    assert p[0] == p_direct[0]
    assert q[0] == q_direct[0]


def test_pinn_predict_routes_windows():
    w0 = PinnModel.create(8, 1, 4, 1.0, 0.01, 0.2, seed=8, t_start=0.0)
    w1 = PinnModel.create(8, 1, 4, 1.0, 0.01, 0.2, seed=9, t_start=0.01)
    t = np.array([0.002, 0.011, 0.0199])
    p, q = pinn_predict([w0, w1], t)
    p0, q0 = pinn_eval(w0, t[:1])
    p1, q1 = pinn_eval(w1, t[1:])
    assert p[0] == p0[0] and q[0] == q0[0]
    assert np.array_equal(p[1:], p1) and np.array_equal(q[1:], q1)


def test_checkpoint_round_trip_deeponet_bitwise(tmp_path):
    model = DeepOnetModel.create(8, 2, 4, 6, 1.7, 0.01, 0.35, seed=11)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, extra={"seed": 11})
    loaded = load_checkpoint(path)
    assert np.array_equal(loaded.params.flat, model.params.flat)
    assert np.array_equal(loaded.rff_t.b_matrix, model.rff_t.b_matrix)
    assert np.array_equal(loaded.rff_ic.b_matrix, model.rff_ic.b_matrix)
    assert loaded.rff_t.seed == model.rff_t.seed
    assert loaded.scale_t == model.scale_t and loaded.scale_pq == model.scale_pq
    rng = np.random.default_rng(2)
    t = rng.uniform(0, 0.01, 5)
    ic = rng.uniform(-0.3, 0.3, (5, 2))
    a = deeponet_eval(model, t, ic)
    b = deeponet_eval(loaded, t, ic)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_checkpoint_round_trip_pinn_stack_bitwise(tmp_path):
    windows = [PinnModel.create(8, 2, 4, 1.0, 0.01, 0.2, seed=s, t_start=0.01 * s)
               for s in range(3)]
    path = tmp_path / "stack.ckpt"
    save_checkpoint(path, windows)
    loaded = load_checkpoint(path)
    assert len(loaded) == 3
    for w, l in zip(windows, loaded):
        assert np.array_equal(w.params.flat, l.params.flat)
        assert l.t_start == w.t_start
        t = np.linspace(w.t_start, w.t_end, 4)
        assert np.array_equal(pinn_eval(w, t)[0], pinn_eval(l, t)[0])


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b'{"format": "something-else"}\n')
    with pytest.raises(ValueError):
        load_checkpoint(path)
