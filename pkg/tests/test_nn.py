import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neuralpde.nn import (
    AdamState,
    DimensionError,
    DivergenceError,
    FeedforwardNet,
    PiecewiseConstantSchedule,
    adam_step,
    decay_schedule,
    n_parameters,
    net_eval,
    net_input_gradient,
    net_param_gradient,
    pack_symmetric_grad,
    sym_size,
    unpack_symmetric,
)


def reference_eval(net: FeedforwardNet, x: np.ndarray) -> np.ndarray:
    """Straight-line evaluator: explicit loops over layers and neurons."""
    act = math.tanh if net.activation == "tanh" else (lambda v: max(v, 0.0))
    a = [float(v) for v in x]
    n_layers = len(net.weights)
    for k in range(n_layers):
        w, b = net.weights[k], net.biases[k]
        out = []
        for j in range(w.shape[1]):
            s = float(b[j])
            for i in range(w.shape[0]):
                s += a[i] * float(w[i, j])
            out.append(act(s) if k < n_layers - 1 else s)
        a = out
    return np.array(a)


def random_net(rng, d_in=3, d_out=2, activation="tanh", widths=None):
    net = FeedforwardNet.glorot(d_in, d_out, rng, hidden_widths=widths, activation=activation)
    net.params[...] += 0.1 * rng.standard_normal(net.n_params)
    return net


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12)


def test_parameter_count_and_default_widths():
    net = FeedforwardNet(3, 2)
    assert net.hidden_widths == (13, 13)
    assert net.n_params == (3 + 1) * 13 + (13 + 1) * 13 + (13 + 1) * 2
    assert n_parameters(3, 2, (13, 13)) == net.n_params


def test_zero_network_outputs_zero():
    net = FeedforwardNet(4, 3)
    x = np.random.default_rng(0).standard_normal((5, 4))
    assert np.array_equal(net(x), np.zeros((5, 3)))


def test_constant_network_returns_output_bias_with_zero_jacobian():
    net = FeedforwardNet(2, 2)
    net.biases[-1][...] = [1.5, -2.0]
    net.biases[0][...] = 0.7
    x = np.random.default_rng(1).standard_normal((4, 2))
    assert np.allclose(net(x), [[1.5, -2.0]] * 4)
    assert np.array_equal(net.input_jacobian(x), np.zeros((4, 2, 2)))


@pytest.mark.parametrize("activation", ["tanh", "relu"])
def test_eval_matches_loop_reference(activation):
    rng = np.random.default_rng(2)
    for _ in range(10):
        net = random_net(rng, 3, 2, activation)
        x = rng.standard_normal(3)
        assert rel_err(net_eval(net, x), reference_eval(net, x)) <= 1e-12


def test_affine_network_jacobian_is_weight_matrix():
    rng = np.random.default_rng(3)
    net = random_net(rng, 3, 2, widths=())
    jac = net_input_gradient(net, rng.standard_normal(3))
    assert np.allclose(jac, net.weights[0].T, rtol=0, atol=1e-14)


def test_wrong_input_width_rejected():
    net = FeedforwardNet(3, 1)
    with pytest.raises(DimensionError):
        net(np.zeros(2))
    with pytest.raises(DimensionError):
        net(np.zeros((4, 5)))


def _fd_input_jacobian(net, x, h=1e-5):
    jac = np.zeros((net.output_dim, net.input_dim))
    for k in range(net.input_dim):
        e = np.zeros_like(x)
        e[k] = h
        jac[:, k] = (net(x + e) - net(x - e)) / (2 * h)
    return jac


def test_input_gradient_vs_finite_differences_100_cases():
    rng = np.random.default_rng(4)
    for _ in range(100):
        d_in, d_out = rng.integers(1, 5, size=2)
        net = random_net(rng, int(d_in), int(d_out))
        x = rng.standard_normal(int(d_in))
        assert rel_err(net.input_jacobian(x), _fd_input_jacobian(net, x)) <= 1e-6


def test_param_gradient_vs_finite_differences_100_cases():
    rng = np.random.default_rng(5)
    for _ in range(100):
        net = random_net(rng, 2, 2, widths=(4, 3))
        x = rng.standard_normal((3, 2))
        target = rng.standard_normal((3, 2))

        def loss(p):
            return 0.5 * np.sum((FeedforwardNet(2, 2, (4, 3), "tanh", p)(x) - target) ** 2)

        grad = net_param_gradient(net, net(x) - target, x)
        fd = np.zeros(net.n_params)
        for k in range(net.n_params):
            e = np.zeros(net.n_params)
            e[k] = 1e-5
            fd[k] = (loss(net.params + e) - loss(net.params - e)) / 2e-5
        assert rel_err(grad, fd) <= 1e-5


def test_param_gradient_trivial_cases():
    rng = np.random.default_rng(6)
    net = random_net(rng, 3, 1)
    x = rng.standard_normal(3)
    assert np.array_equal(net_param_gradient(net, np.zeros(1), x), np.zeros(net.n_params))
    grad = net_param_gradient(net, np.ones(1), x)
    assert grad[-1] == 1.0  # output bias of a scalar net


def test_batch_gradient_is_sum_of_sample_gradients():
    rng = np.random.default_rng(7)
    net = random_net(rng, 2, 3)
    x = rng.standard_normal((5, 2))
    g = rng.standard_normal((5, 3))
    total = net.param_grad(x, g)
    summed = sum(net.param_grad(x[b], g[b]) for b in range(5))
    assert np.allclose(total, summed, rtol=1e-13, atol=1e-15)


def test_double_backprop_matches_finite_differences():
    rng = np.random.default_rng(8)
    net = random_net(rng, 3, 1, widths=(5, 4))
    x = rng.standard_normal((6, 3))
    a = rng.standard_normal(6)
    c = rng.standard_normal((6, 3))

    def loss(p):
        n = FeedforwardNet(3, 1, (5, 4), "tanh", p)
        u, du, _ = n.value_and_gradient(x)
        return np.sum(a * u) + np.sum(c * du)

    u, du, cache = net.value_and_gradient(x)
    assert np.allclose(du, net.input_jacobian(x)[:, 0, :], rtol=1e-12, atol=1e-14)
    grad = net.param_grad_value_and_gradient(cache, a, c)
    fd = np.zeros(net.n_params)
    for k in range(net.n_params):
        e = np.zeros(net.n_params)
        e[k] = 1e-5
        fd[k] = (loss(net.params + e) - loss(net.params - e)) / 2e-5
    assert rel_err(grad, fd) <= 1e-6


def test_relu_derivative_at_kink_is_zero():
    net = FeedforwardNet(1, 1, hidden_widths=(1,), activation="relu")
    net.weights[0][...] = 1.0
    net.weights[1][...] = 1.0
    assert net.input_jacobian(np.zeros(1))[0, 0] == 0.0
    assert net.input_jacobian(np.ones(1))[0, 0] == 1.0


def test_serialization_round_trip_is_bit_identical(tmp_path):
    rng = np.random.default_rng(9)
    net = random_net(rng, 3, 2)
    path = tmp_path / "net.json"
    net.save(path)
    again = FeedforwardNet.load(path)
    x = rng.standard_normal((7, 3))
    assert np.array_equal(again.params, net.params)
    assert np.array_equal(again(x), net(x))


def test_checkpoint_version_checked():
    data = FeedforwardNet(1, 1).to_dict()
    data["version"] = 99
    with pytest.raises(ValueError):
        FeedforwardNet.from_dict(data)


@given(st.integers(min_value=1, max_value=5), st.integers(min_value=0, max_value=2**32 - 1))
@settings(max_examples=30, deadline=None)
def test_symmetric_unpack_is_symmetric_and_pack_grad_is_chain_rule(d, seed):
    rng = np.random.default_rng(seed)
    packed = rng.standard_normal((2, sym_size(d)))
    mat = unpack_symmetric(packed, d)
    assert np.array_equal(mat, np.swapaxes(mat, -1, -2))
    # linear functional <G, S(p)> has packed gradient pack_symmetric_grad(G)
    G = rng.standard_normal((2, d, d))
    grad = pack_symmetric_grad(G, d)
    for k in range(sym_size(d)):
        e = np.zeros_like(packed)
        e[:, k] = 1.0
        assert np.allclose(np.sum(G * unpack_symmetric(e, d), axis=(1, 2)), grad[:, k])


def test_adam_zero_gradient_keeps_params():
    p = np.array([1.0, -2.0])
    new, state = adam_step(p, np.zeros(2), AdamState.zeros(2))
    assert np.array_equal(new, p)
    assert state.step_count == 1


def test_adam_first_step_hand_value():
    state = AdamState.zeros(1, PiecewiseConstantSchedule([], [1e-3]))
    new, _ = adam_step(np.zeros(1), np.ones(1), state)
    assert new[0] == pytest.approx(-1e-3 / (1 + 1e-8), rel=1e-12)


def test_adam_odd_symmetry():
    g = np.array([0.3, -1.2, 4.0])
    up, _ = adam_step(np.zeros(3), g, AdamState.zeros(3))
    down, _ = adam_step(np.zeros(3), -g, AdamState.zeros(3))
    assert np.array_equal(up, -down)


def test_adam_step_count_and_divergence_error():
    state = AdamState.zeros(2)
    p = np.zeros(2)
    for k in range(3):
        p, state = adam_step(p, np.ones(2), state)
        assert state.step_count == k + 1
    with pytest.raises(DivergenceError) as info:
        adam_step(p, np.array([np.nan, 0.0]), state)
    assert info.value.step == 4


def test_decay_schedule_endpoints():
    sched = decay_schedule(600, 1e-3, 1e-5, 6)
    assert sched(1) == pytest.approx(1e-3)
    assert sched(600) == pytest.approx(1e-5)
    values = [sched(s) for s in range(1, 601)]
    assert all(a >= b for a, b in zip(values, values[1:]))
    assert len(set(values)) == 6
