import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import gradcheck
from pyrogrid import numerics as nx
from pyrogrid.errors import ShapeError
from pyrogrid.nets import (
    ActorNet, AgentNet, CriticNet, NetConfig, actor_forward, advance_state, critic_forward,
    decode_obs, encode, param_count, predict_fire, rollout,
)

SMALL = NetConfig(n_agents=3, channels=3, grid=16, d_enc=5, d_h=4, widths=(2, 2, 3, 3), rl_hidden=6)


def zero_net(cfg):
    net = AgentNet(cfg, np.random.default_rng(0))
    for p in net.parameters():
        p.data[...] = 0.0
    return net


def randomize(net, rng, scale=0.5):
    # the output layers start at zero; give them mass so gradients are non-trivial
    for p in net.parameters():
        if not p.data.any():
            p.data[...] = rng.uniform(-scale, scale, p.shape)


# ---------------------------------------------------------------- shapes
@pytest.mark.parametrize("grid", [16, 32, 64])
def test_shape_contract(grid):
    cfg = NetConfig(grid=grid, d_enc=8, d_h=6, widths=(2, 2, 2, 2))
    net = AgentNet(cfg, np.random.default_rng(1))
    x = np.random.default_rng(2).random((cfg.channels, grid, grid))
    assert encode(x, net).shape == (cfg.d_enc,)
    h, xh = advance_state(np.zeros(cfg.d_h), x, net)
    assert h.shape == (cfg.d_h,)
    assert xh.shape == (cfg.channels, grid, grid)
    assert predict_fire(h, net).shape == (4, grid, grid)


def test_stacked_layout():
    net = AgentNet(SMALL, [np.random.default_rng(i) for i in range(3)])
    x = np.random.default_rng(0).random((3, 2, 3, 16, 16))
    h, xh = advance_state(np.zeros((3, 2, 4)), x, net)
    assert h.shape == (3, 2, 4) and xh.shape == (3, 2, 3, 16, 16)
    assert predict_fire(h, net).shape == (3, 2, 4, 16, 16)
    with pytest.raises(ShapeError):
        encode(x[0, 0], net)  # single sample is ambiguous for a 3-stack


def test_bad_shapes_raise():
    net = AgentNet(SMALL, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        encode(np.zeros((3, 8, 8)), net)
    with pytest.raises(ShapeError):
        predict_fire(np.zeros(5), net)
    with pytest.raises(ShapeError):
        NetConfig(grid=20)


@pytest.mark.parametrize("static", [False, True])
def test_param_count_closed_form(static):
    for cfg in (SMALL, NetConfig(), NetConfig(grid=64, n_agents=7)):
        net = AgentNet(cfg, np.random.default_rng(0), static=static)
        assert sum(p.size for p in net.parameters()) == param_count(cfg, static)


def test_stack_slices_equal_single_agents():
    stack = AgentNet(SMALL, [np.random.default_rng([5, i]) for i in range(3)])
    for i in range(3):
        single = AgentNet(SMALL, np.random.default_rng([5, i]), agent_ids=[i])
        for a, b in zip(stack.parameters(), single.parameters()):
            assert np.array_equal(a.data[i], b.data[0])


def test_state_round_trip():
    net = AgentNet(SMALL, [np.random.default_rng(i) for i in range(2)], agent_ids=[4, 7])
    state = net.state()
    assert "agent7.encoder.conv0.kernel" in state
    other = AgentNet(SMALL, [np.random.default_rng(9 + i) for i in range(2)], agent_ids=[4, 7])
    other.load(state)
    for a, b in zip(net.parameters(), other.parameters()):
        assert np.array_equal(a.data, b.data)


# ---------------------------------------------------------------- fixed-point examples
def test_zero_params_examples():
    net = zero_net(SMALL)
    x = np.zeros((3, 16, 16))
    assert np.array_equal(encode(x, net).data, np.zeros(5))
    h, xh = advance_state(np.zeros(4), np.random.default_rng(0).random((3, 16, 16)), net)
    assert np.array_equal(h.data, np.zeros(4))
    assert np.all(xh.data == 0.5)
    assert np.all(predict_fire(h, net).data == 0.5)


def test_untrained_heads_emit_half():
    net = AgentNet(NetConfig(), np.random.default_rng(3))
    h = np.random.default_rng(4).standard_normal(64)
    assert np.all(predict_fire(h, net).data == 0.5)


def test_determinism():
    net = AgentNet(SMALL, np.random.default_rng(0))
    randomize(net, np.random.default_rng(1))
    x = np.random.default_rng(2).random((3, 16, 16))
    h = np.random.default_rng(3).standard_normal(4)
    a = advance_state(h, x, net)
    b = advance_state(h, x, net)
    assert np.array_equal(a[0].data, b[0].data) and np.array_equal(a[1].data, b[1].data)
    assert np.array_equal(encode(x, net).data, encode(x, net).data)


def test_outputs_strictly_inside_unit_interval():
    net = AgentNet(SMALL, np.random.default_rng(0))
    for p in net.parameters():
        p.data[...] = np.random.default_rng(1).uniform(-40, 40, p.shape)
    x = np.random.default_rng(2).random((3, 16, 16))
    h, xh = advance_state(np.zeros(4), x, net)
    f = predict_fire(h, net).data
    assert np.all((xh.data > 0) & (xh.data < 1)) and np.all((f > 0) & (f < 1))


def test_rollout_matches_stepwise():
    net = AgentNet(SMALL, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    frames = rng.random((1, 2, 3, 3, 16, 16))
    h0 = rng.standard_normal((1, 2, 4))
    states = rollout(h0, frames, net).data
    for m in range(2):
        h = h0[0, m]
        for t in range(3):
            h, _ = advance_state(h, frames[0, m, t], net)
            np.testing.assert_allclose(states[0, m, t], h.data, rtol=0, atol=1e-13)


# ---------------------------------------------------------------- gradients
def _param_arrays(params):
    return {str(i): p.data for i, p in enumerate(params)}


def _analytic(params):
    return {str(i): p.grad.copy() for i, p in enumerate(params)}


@pytest.mark.parametrize("seed", range(3))
def test_advance_state_three_step_gradients(seed):
    rng = np.random.default_rng(seed)
    net = AgentNet(SMALL, rng)
    randomize(net, rng)
    xs = rng.random((3, 3, 16, 16))
    target = rng.random((3, 16, 16))
    h0 = rng.standard_normal(4) * 0.5

    def loss():
        h = nx.Tensor(h0)
        total = None
        for t in range(3):
            h, xh = advance_state(h, xs[t], net)
            term = nx.mse(xh, target)
            total = term if total is None else total + term
        return total

    params = net.sys_params()
    nx.zero_grad(params)
    nx.backward(loss())
    err = gradcheck(lambda: loss().item(), _param_arrays(params), _analytic(params), rng, coords=2)
    assert err < 1e-4


@pytest.mark.parametrize("seed", range(3))
def test_predict_fire_gradients(seed):
    rng = np.random.default_rng(seed)
    net = AgentNet(SMALL, rng)
    randomize(net, rng)
    h = rng.standard_normal(4)
    target = (rng.random((4, 16, 16)) > 0.7).astype(float)

    def loss():
        return nx.bce(predict_fire(h, net), target)

    params = net.pred_params()
    nx.zero_grad(params)
    nx.backward(loss())
    assert gradcheck(lambda: loss().item(), _param_arrays(params), _analytic(params), rng) < 1e-4


def test_critic_gradients_wrt_inputs(rng):
    critic = CriticNet(SMALL, rng)
    hbar = nx.Tensor(rng.standard_normal(12), requires_grad=True)
    a = nx.Tensor(rng.random((3, 3)), requires_grad=True)

    def loss():
        return critic_forward(hbar, a, critic)

    nx.backward(loss())
    arrays = {"h": hbar.data, "a": a.data}
    grads = {"h": hbar.grad.copy(), "a": a.grad.copy()}
    assert gradcheck(lambda: loss().item(), arrays, grads, rng) < 1e-4


# ---------------------------------------------------------------- actor / critic
def test_actor_zero_logits_uniform():
    actor = ActorNet(SMALL, np.random.default_rng(0))
    a = actor_forward(np.random.default_rng(1).standard_normal(12), actor).data
    expected = np.full((3, 3), 0.1)
    np.fill_diagonal(expected, 0.8)
    np.testing.assert_allclose(a, expected, rtol=0, atol=1e-15)


def test_action_matrix_saturated_logit():
    logits = np.zeros((3, 3))
    logits[2, 0] = 50.0  # source 2 strongly preferred for destination 0
    a = nx.action_matrix(nx.Tensor(logits), 0.8).data
    assert abs(a[2, 0] - 0.2) < 1e-12 and a[1, 0] < 1e-20


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**31 - 1), st.floats(0.05, 0.95))
def test_action_matrix_invariants(n, seed, c):
    logits = np.random.default_rng(seed).standard_normal((n, n)) * 10
    a = nx.action_matrix(nx.Tensor(logits), c).data
    np.testing.assert_allclose(a.sum(axis=0), 1.0, atol=1e-9)
    assert np.all(a >= 0)
    if n > 1:
        assert np.all(np.diag(a) == c)


def test_critic_zero_params_and_determinism(rng):
    critic = CriticNet(SMALL, rng)
    hbar, a = rng.standard_normal(12), rng.random((3, 3))
    q1, q2 = critic_forward(hbar, a, critic).item(), critic_forward(hbar, a, critic).item()
    assert q1 == q2
    for p in critic.parameters():
        p.data[...] = 0
    assert critic_forward(hbar, a, critic).item() == 0.0
    with pytest.raises(ShapeError):
        critic_forward(rng.standard_normal(11), a, critic)


def test_decode_obs_shape_batch():
    net = AgentNet(SMALL, np.random.default_rng(0))
    assert decode_obs(np.zeros((5, 4)), net).shape == (5, 3, 16, 16)
