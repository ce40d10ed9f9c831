import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sagin_agents import market, rl, sim
from sagin_agents.domain import DomainError, default_config
from sagin_agents.market import BidProfile
from sagin_agents.rl import (DqnAgent, QNetwork, ReplayBuffer, TrainConfig, Transition,
                             action_to_rho, batch_loss, encode_state, td_target)

CHI2_9_99 = 21.665994333461924  # 0.99 quantile of chi-square with 9 dof, scipy


def constant_net(outputs, n_in=3):
    """Network whose output ignores the input."""
    net = QNetwork((n_in, 4, len(outputs)))
    for w in net.weights:
        w[...] = 0.0
    net.biases[-1][...] = outputs
    return net


@pytest.fixture(scope="module")
def market_env():
    cfg = default_config(seed=0)
    return cfg, sim.run_scenario(cfg)


def test_encode_state_example():
    got = encode_state(BidProfile(1.0, (10.0, 4.0, 3.0)), 5)
    assert np.array_equal(got, [0.1, 1.0, 0.4, 0.3, 0.0])


@given(st.floats(0, 100), st.lists(st.floats(0, 100), min_size=1, max_size=4), st.randoms())
def test_encode_state_order_free(x0, ground, rnd):
    shuffled = ground[:]
    rnd.shuffle(shuffled)
    a = encode_state(BidProfile(x0, tuple(ground)), 6)
    b = encode_state(BidProfile(x0, tuple(shuffled)), 6)
    assert np.array_equal(a, b)


def test_encode_state_zero_and_overflow():
    assert not encode_state(BidProfile(0.0, (0.0, 0.0)), 4).any()
    with pytest.raises(DomainError):
        encode_state(BidProfile(1.0, (1.0, 2.0)), 2)


@pytest.mark.parametrize("a, want", [(0, 1.0), (5, 10 ** 0.5), (9, 7.9432823472428150207)])
def test_action_to_rho(a, want):
    assert action_to_rho(a, 10) == pytest.approx(want, rel=1e-15)


@pytest.mark.parametrize("a", [-1, 10])
def test_action_to_rho_range(a):
    with pytest.raises(DomainError):
        action_to_rho(a, 10)


@given(st.integers(2, 50), st.data())
def test_rho_range(n, data):
    a = data.draw(st.integers(0, n - 1))
    assert 1.0 <= action_to_rho(a, n) < 10.0


def test_td_target_cases():
    target = constant_net([2.0, 0.0, 1.0])
    s = np.ones(3)
    assert td_target(Transition(s, 0, 1.0, s), target, 0.0) == 1.0
    assert td_target(Transition(s, 0, 1.0, s, done=True), target, 0.99) == 1.0
    assert td_target(Transition(s, 0, 1.0, s), target, 0.99) == pytest.approx(2.98, rel=1e-15)


def test_batch_loss_cases():
    s = np.ones(3)
    zero = constant_net([0.0, 0.0])
    assert batch_loss([Transition(s, 0, 0.0, s, True)], zero, zero, 0.5) == 0.0
    assert batch_loss([Transition(s, 1, 1.0, s, True)], zero, zero, 0.5) == 1.0
    q = constant_net([0.5, -1.0])
    batch = [Transition(s, 0, 2.0, s, True), Transition(s, 1, 0.0, s, True),
             Transition(s, 0, 0.5, s, True), Transition(s, 1, 3.0, s, True)]
    # hand arithmetic: gaps 1.5, 1.0, 0.0, 4.0
    assert batch_loss(batch, q, q, 0.5) == pytest.approx((2.25 + 1.0 + 0.0 + 16.0) / 4, rel=1e-15)
    with pytest.raises(DomainError):
        batch_loss([], q, q, 0.5)


def finite_difference_check(net, states, actions, targets, h=1e-6):
    """Largest relative gap between backprop and central differences."""
    _, gw, gb = net.loss_and_gradients(states, actions, targets)
    worst = 0.0
    for p, g in zip(net.params(), [x for pair in zip(gw, gb) for x in pair]):
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = net.loss_and_gradients(states, actions, targets)[0]
            p[idx] = old - h
            down = net.loss_and_gradients(states, actions, targets)[0]
            p[idx] = old
            num = (up - down) / (2 * h)
            scale = max(abs(num), abs(g[idx]), 1e-6)
            worst = max(worst, abs(num - g[idx]) / scale)
    return worst


def test_gradient_three_transitions():
    rng = np.random.default_rng(4)
    net = QNetwork((4, 6, 5, 3), rng)
    states = rng.uniform(0, 1, size=(3, 4))
    assert finite_difference_check(net, states, np.array([0, 2, 1]), rng.normal(size=3)) < 1e-4


def test_train_step_sync_and_zero_rate():
    cfg = TrainConfig(batch_size=4, buffer_capacity=16, target_sync_period=2, learning_rate=0.0,
                      hidden=(5,))
    agent = DqnAgent(3, cfg, seed=1)
    assert agent.train_step() is None
    rng = np.random.default_rng(0)
    for _ in range(8):
        agent.buffer.add(Transition(rng.random(3), int(rng.integers(10)), 1.0, rng.random(3)))
    before = [p.copy() for p in agent.net.params()]
    agent.train_step()
    assert all(np.array_equal(a, b) for a, b in zip(before, agent.net.params()))

    cfg = TrainConfig(batch_size=4, buffer_capacity=16, target_sync_period=2, hidden=(5,))
    agent2 = DqnAgent(3, cfg, seed=1)
    agent2.buffer = agent.buffer
    agent2.train_step()
    assert not all(np.array_equal(a, b) for a, b in zip(agent2.net.params(), agent2.target.params()))
    agent2.train_step()
    assert all(np.array_equal(a, b) for a, b in zip(agent2.net.params(), agent2.target.params()))


def test_replay_buffer_is_fifo_ring():
    buf = ReplayBuffer(3, 1)
    for i in range(5):
        buf.add(Transition(np.array([i]), 0, float(i), np.array([i])))
    assert len(buf) == 3
    assert [t.reward for t in buf.transitions()] == [2.0, 3.0, 4.0]
    assert len(buf.sample(3, np.random.default_rng(0))) == 3


def test_epsilon_one_is_uniform():
    agent = DqnAgent(3, TrainConfig(), seed=5)
    counts = np.bincount([agent.act(np.ones(3), 1.0) for _ in range(10_000)], minlength=10)
    expected = 1000.0
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    assert chi2 < CHI2_9_99


def test_epsilon_zero_constant_rho(market_env):
    cfg, res = market_env
    agent = DqnAgent(len(cfg.operators), TrainConfig(learning_rate=0.0), seed=0)
    outs = np.zeros(10)
    outs[3] = 1.0
    agent.net = constant_net(outs, len(cfg.operators))
    env = sim.market_episode_source(cfg, result=res)
    tr = rl.run_dqmsb_episode(env, agent, iterations=30, learn=False, epsilon=0.0)
    assert set(tr.actions) == {3}


def test_reward_is_normalised_total_surplus(market_env):
    cfg, res = market_env
    env = sim.market_episode_source(cfg, result=res)
    twin = sim.market_episode_source(cfg, result=res)
    agent = DqnAgent(len(cfg.operators), seed=0)
    tr = rl.run_dqmsb_episode(env, agent, iterations=10, learn=False, epsilon=1.0)
    for a, s, r in zip(tr.actions, tr.surplus, tr.rewards):
        rnd = twin.next_round()
        out = market.msb(rnd.bids, action_to_rho(a, 10))
        assert s == market.surplus(out, rnd.values)[0]
        assert r == s / max(rnd.bids.all)


def test_training_is_reproducible(market_env):
    cfg, res = market_env

    def run():
        env = sim.market_episode_source(cfg, result=res)
        agent = DqnAgent(len(cfg.operators), TrainConfig(), seed=7)
        return [t.mean_surplus for t in rl.train(env, agent, 200)], agent.net

    (a, na), (b, nb) = run(), run()
    assert a == b
    assert rl.dumps_checkpoint(na) == rl.dumps_checkpoint(nb)


def test_checkpoint_round_trip(tmp_path):
    net = QNetwork((6, 64, 64, 10), np.random.default_rng(3))
    path = tmp_path / "c.dqn"
    rl.save_checkpoint(net, path)
    again = rl.load_checkpoint(path)
    assert again.layer_sizes == net.layer_sizes
    x = np.linspace(0, 1, 6)
    assert np.array_equal(again.forward(x), net.forward(x))
    data = path.read_bytes()
    assert data[:8] == rl.MAGIC
    assert len(data) == 8 + 8 + 4 * 4 + 8 * (6 * 64 + 64 + 64 * 64 + 64 + 64 * 10 + 10)


@pytest.mark.parametrize("mangle", [
    lambda d: b"NOTAQNET" + d[8:],
    lambda d: d[:-3],
    lambda d: d[:12],
    lambda d: d[:8] + (2).to_bytes(4, "little") + d[12:],
])
def test_corrupt_checkpoints(mangle):
    data = rl.dumps_checkpoint(QNetwork((3, 4, 2)))
    with pytest.raises(rl.CheckpointError):
        rl.loads_checkpoint(mangle(data))


@settings(max_examples=20, deadline=None)
@given(st.integers(60, 120))
def test_curve_slope_of_a_line(n):
    x = np.arange(n, dtype=float)
    y = 10.0 + 0.5 * x
    got = rl.curve_slope(list(y), window=50)
    tail = y[-50:]
    assert got == pytest.approx(0.5 / tail.mean(), rel=1e-9)
