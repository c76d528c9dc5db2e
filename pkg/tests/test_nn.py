"""Numeric-core checks: closed forms, finite-difference oracles, checkpoints."""

import math

import numpy as np
import pytest

from omrl import nn
from omrl.errors import ContractViolation, DataFormatError
from omrl.rng import seeded_rng


def make_net(in_dim, out_dim, hidden, seed=0):
    return nn.init_params(in_dim, out_dim, tuple(hidden), seeded_rng(seed, "test-net"))


def make_fd_net(in_dim, out_dim, hidden, seed=0):
    """Net with random biases so pre-activations are not exactly zero."""
    net = make_net(in_dim, out_dim, hidden, seed)
    rng = seeded_rng(seed, "test-bias")
    return nn.MlpParams(
        net.layer_weights,
        tuple(rng.uniform(-0.5, 0.5, size=b.shape) for b in net.layer_biases),
        net.in_dim, net.out_dim, net.hidden_dims,
    )


def kink_free_input(net, rng, batch, h):
    """Sample inputs whose pre-activations stay clear of the rectifier kink.

    Central differences are invalid within +-h of a kink, so the oracle only
    compares at points where every |pre-activation| exceeds a safety margin.
    """
    for _ in range(100):
        x = rng.normal(size=(batch, net.in_dim))
        _, pre, _ = nn._forward_cached(net, x)
        if min(np.abs(z).min() for z in pre) > 5 * h:
            return x
    raise AssertionError("could not find kink-free input")


def finite_diff_grads(params, x, upstream, h=1e-3):
    """Central-difference gradient of sum(upstream * forward) per parameter."""

    def value(p):
        return float((upstream * nn.forward(p, x)).sum())

    gw, gb = [], []
    for li in range(params.n_layers):
        w = params.layer_weights[li]
        g = np.zeros_like(w)
        for idx in np.ndindex(w.shape):
            for sign in (+1.0, -1.0):
                ws = [a.copy() for a in params.layer_weights]
                ws[li][idx] += sign * h
                p2 = nn.MlpParams(tuple(ws), params.layer_biases, params.in_dim,
                                  params.out_dim, params.hidden_dims)
                g[idx] += sign * value(p2)
        gw.append(g / (2 * h))
        b = params.layer_biases[li]
        g = np.zeros_like(b)
        for idx in np.ndindex(b.shape):
            for sign in (+1.0, -1.0):
                bs = [a.copy() for a in params.layer_biases]
                bs[li][idx] += sign * h
                p2 = nn.MlpParams(params.layer_weights, tuple(bs), params.in_dim,
                                  params.out_dim, params.hidden_dims)
                g[idx] += sign * value(p2)
        gb.append(g / (2 * h))
    return nn.GradBundle(tuple(gw), tuple(gb))


def max_rel_err(analytic, numeric):
    worst = 0.0
    for a, b in zip(
        analytic.layer_weights + analytic.layer_biases,
        numeric.layer_weights + numeric.layer_biases,
    ):
        denom = np.maximum(np.abs(b), 1.0)
        worst = max(worst, float(np.max(np.abs(a - b) / denom)))
    return worst


# ---------------------------------------------------------------- forward

def test_forward_zero_network_outputs_zero():
    net = make_net(4, 3, [8, 8])
    net = nn.MlpParams(
        tuple(np.zeros_like(w) for w in net.layer_weights),
        tuple(np.zeros_like(b) for b in net.layer_biases),
        net.in_dim, net.out_dim, net.hidden_dims,
    )
    out = nn.forward(net, seeded_rng(1, "x").normal(size=(5, 4)))
    assert np.all(out == 0.0)


def test_forward_hand_evaluated_chain():
    # 1 -> [1] -> 1 with w1=2, b1=0, w2=3, b2=1 on input 1.0: 3*max(0, 2*1)+1 = 7
    net = nn.MlpParams(
        (np.array([[2.0]]), np.array([[3.0]])),
        (np.array([0.0]), np.array([1.0])),
        1, 1, (1,),
    )
    out = nn.forward(net, np.array([[1.0]]))
    assert out.shape == (1, 1)
    assert out[0, 0] == pytest.approx(7.0, abs=0)


def test_forward_all_negative_preactivations_give_bias():
    net = make_net(3, 2, [6])
    w0 = -np.abs(net.layer_weights[0]) - 0.1
    b_out = np.array([1.5, -2.5])
    net = nn.MlpParams((w0, net.layer_weights[1]), (np.zeros(6), b_out), 3, 2, (6,))
    out = nn.forward(net, np.abs(seeded_rng(2, "x").normal(size=(4, 3))))
    assert np.allclose(out, b_out[None, :], atol=0)


def test_forward_rejects_bad_shape():
    net = make_net(3, 2, [4])
    with pytest.raises(ContractViolation):
        nn.forward(net, np.zeros((2, 5)))


def test_forward_homogeneous_in_last_layer():
    net = make_net(5, 4, [9, 7], seed=3)
    x = seeded_rng(4, "x").normal(size=(6, 5))
    scaled = nn.MlpParams(
        net.layer_weights[:-1] + (3.0 * net.layer_weights[-1],),
        net.layer_biases[:-1] + (np.zeros(4),),
        5, 4, (9, 7),
    )
    base = nn.MlpParams(net.layer_weights, net.layer_biases[:-1] + (np.zeros(4),), 5, 4, (9, 7))
    assert np.allclose(nn.forward(scaled, x), 3.0 * nn.forward(base, x), rtol=1e-12)


# --------------------------------------------------------------- backprop

def test_backprop_zero_upstream_gives_zero_grads():
    net = make_net(6, 3, [5, 4], seed=5)
    x = seeded_rng(6, "x").normal(size=(4, 6))
    g = nn.backprop(net, x, np.zeros((4, 3)))
    assert all(np.all(a == 0) for a in g.layer_weights + g.layer_biases)


def test_backprop_matches_finite_differences():
    net = make_fd_net(6, 3, [5, 4], seed=7)
    rng = seeded_rng(8, "x")
    x = kink_free_input(net, rng, 4, 1e-3)
    up = rng.normal(size=(4, 3))
    analytic = nn.backprop(net, x, up)
    numeric = finite_diff_grads(net, x, up)
    assert max_rel_err(analytic, numeric) <= 1e-4


def test_backprop_single_linear_layer_outer_product():
    rng = seeded_rng(9, "x")
    w = rng.normal(size=(3, 4))
    net = nn.MlpParams((w,), (np.zeros(3),), 4, 3, ())
    x = rng.normal(size=(1, 4))
    up = rng.normal(size=(1, 3))
    g = nn.backprop(net, x, up)
    assert np.allclose(g.layer_weights[0], np.outer(up[0], x[0]), rtol=1e-12)
    assert np.allclose(g.layer_biases[0], up[0], rtol=1e-12)


# ------------------------------------------------------------------- adam

def test_adam_zero_gradient_leaves_params():
    net = make_net(3, 2, [4], seed=10)
    state = nn.adam_init(net, lr=0.1)
    new, state2 = nn.adam_step(net, nn.zeros_like_grads(net), state)
    assert state2.step_count == 1
    for a, b in zip(new.layer_weights, net.layer_weights):
        assert np.array_equal(a, b)


def test_adam_first_step_closed_form():
    # scalar parameter, g=1, lr=0.1: delta = -0.1 * 1 / (1 + 1e-8)
    net = nn.MlpParams((np.array([[0.0]]),), (np.array([0.0]),), 1, 1, ())
    state = nn.adam_init(net, lr=0.1)
    grads = nn.GradBundle((np.array([[1.0]]),), (np.array([0.0]),))
    new, _ = nn.adam_step(net, grads, state)
    assert new.layer_weights[0][0, 0] == pytest.approx(-0.1 / (1 + 1e-8), rel=1e-12)


def test_adam_deterministic():
    net = make_net(4, 3, [5], seed=11)
    grads = nn.backprop(net, seeded_rng(12, "x").normal(size=(2, 4)), np.ones((2, 3)))
    a1, s1 = nn.adam_step(net.copy(), grads, nn.adam_init(net))
    a2, s2 = nn.adam_step(net.copy(), grads, nn.adam_init(net))
    for x, y in zip(a1.layer_weights, a2.layer_weights):
        assert np.array_equal(x, y)
    for x, y in zip(s1.second_moment.layer_weights, s2.second_moment.layer_weights):
        assert np.array_equal(x, y)


# ---------------------------------------------------------------- scalars

def test_logsumexp_closed_forms():
    assert nn.logsumexp(np.array([2.0, 2.0, 2.0])) == pytest.approx(2.0 + math.log(3.0), rel=1e-12)
    assert nn.logsumexp(np.array([0.0, 0.0])) == pytest.approx(math.log(2.0), rel=1e-12)


def test_logsumexp_large_values_do_not_overflow():
    # exp(-1000) underflows in float64, so the exact answer rounds to 1000.0
    val = nn.logsumexp(np.array([1000.0, 0.0]))
    assert np.isfinite(val)
    assert val == 1000.0


def test_logsumexp_bounds_property():
    rng = seeded_rng(13, "rows")
    for _ in range(200):
        n = int(rng.integers(1, 12))
        row = rng.normal(scale=50.0, size=n)
        v = nn.logsumexp(row)
        assert row.max() <= v <= row.max() + math.log(n) + 1e-12


def test_logsumexp_empty_row_rejected():
    with pytest.raises(ContractViolation):
        nn.logsumexp(np.array([]))


def test_huber_values():
    assert nn.huber(0.0, 1.0) == 0.0
    assert nn.huber(1.0, 1.0) == pytest.approx(0.5)
    assert nn.huber(3.0, 1.0) == pytest.approx(2.5)
    assert nn.huber(-3.0, 1.0) == pytest.approx(2.5)


def test_softmax_xent_uniform_and_peaked():
    loss, _ = nn.softmax_xent(np.zeros(7), 3)
    assert loss == pytest.approx(math.log(7.0), rel=1e-12)
    loss, _ = nn.softmax_xent(np.array([10.0, -10.0]), 0)
    assert loss == pytest.approx(math.log1p(math.exp(-20.0)), rel=1e-9)


def test_softmax_xent_grad_sums_to_zero():
    rng = seeded_rng(14, "logits")
    for _ in range(50):
        z = rng.normal(scale=5.0, size=int(rng.integers(2, 9)))
        _, grad = nn.softmax_xent(z, int(rng.integers(0, z.size)))
        assert abs(grad.sum()) < 1e-12


def test_softmax_xent_bad_label():
    with pytest.raises(ContractViolation):
        nn.softmax_xent(np.zeros(3), 3)


# ------------------------------------------------------------- checkpoint

def test_checkpoint_roundtrip_value_identical(tmp_path):
    nets = [make_net(6, 3, [8, 5], seed=20), make_net(17, 75, [4], seed=21)]
    path = tmp_path / "nets.net"
    nn.save_params(path, nets)
    loaded = nn.load_params(path)
    assert len(loaded) == 2
    for a, b in zip(nets, loaded):
        assert (a.in_dim, a.out_dim, a.hidden_dims) == (b.in_dim, b.out_dim, b.hidden_dims)
        for x, y in zip(a.layer_weights + a.layer_biases, b.layer_weights + b.layer_biases):
            assert np.array_equal(x, y)


def test_checkpoint_save_is_canonical(tmp_path):
    net = make_net(5, 2, [3], seed=22)
    p1, p2 = tmp_path / "a.net", tmp_path / "b.net"
    nn.save_params(p1, net)
    nn.save_params(p2, nn.load_params(p1))
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.net"
    path.write_bytes(b"NOTMAGIC!" + b"\x00" * 16)
    with pytest.raises(DataFormatError):
        nn.load_params(path)


def test_checkpoint_rejects_truncation(tmp_path):
    net = make_net(5, 2, [3], seed=23)
    path = tmp_path / "t.net"
    nn.save_params(path, net)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) - 9])
    with pytest.raises(DataFormatError) as exc:
        nn.load_params(path)
    assert exc.value.offset is not None


# ------------------------------------------------- finite-difference sweep

def test_gradient_sweep_across_artifact_dims():
    # Spans the artifact's obs/action dims (6..17 in, 3..75 out).
    rng = seeded_rng(30, "sweep")
    worst = 0.0
    for trial in range(20):
        in_dim = int(rng.integers(6, 18))
        out_dim = int(rng.integers(3, 76))
        hidden = tuple(int(rng.integers(3, 9)) for _ in range(int(rng.integers(1, 3))))
        net = make_fd_net(in_dim, out_dim, hidden, seed=100 + trial)
        x = kink_free_input(net, rng, 3, 1e-3)
        up = rng.normal(size=(3, out_dim))
        worst = max(worst, max_rel_err(nn.backprop(net, x, up), finite_diff_grads(net, x, up)))
    assert worst <= 1e-4
