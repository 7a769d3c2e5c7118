import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from costnet.agent import (
    Agent,
    AgentConfig,
    EpisodeMetrics,
    ShapingConfigError,
    dqn_loss,
    dqn_update,
    epsilon_greedy,
    explore_rate,
    shaped_target,
    steps_to_threshold,
    sync_target,
    train_agent,
)
from costnet.envs import Maze
from costnet.mdp import Batch
from costnet.nn import check_gradients

finite = st.floats(-100, 100, allow_nan=False)
unit = st.floats(0, 1)


def toy_batch(n=8, width=3, seed=0, done=False):
    rng = np.random.default_rng(seed)
    return Batch(
        rng.normal(size=(n, width)).astype(np.float32),
        rng.integers(0, 2, size=n),
        rng.normal(size=n).astype(np.float32),
        rng.normal(size=(n, width)).astype(np.float32),
        np.full(n, done),
    )


def test_greedy_examples():
    rng = np.random.default_rng(0)
    assert epsilon_greedy([1, 3, 2], 0.0, rng) == 1
    assert epsilon_greedy([5, 5], 0.0, rng) == 0
    with pytest.raises(ValueError):
        epsilon_greedy([], 0.0, rng)
    with pytest.raises(ValueError):
        epsilon_greedy([1.0], 1.5, rng)


def test_full_exploration_is_uniform():
    rng = np.random.default_rng(0)
    draws = [epsilon_greedy([0, 0, 0, 9], 1.0, rng) for _ in range(10_000)]
    freq = np.bincount(draws, minlength=4) / 10_000
    assert np.all((freq >= 0.22) & (freq <= 0.28))


@given(q=st.lists(finite, min_size=1, max_size=6), scale=st.floats(0.01, 100), shift=finite)
def test_greedy_choice_is_affine_invariant(q, scale, shift):
    q = np.array(q)
    rng = np.random.default_rng(0)
    moved = q * scale + shift
    # skip cases where rounding merges or splits the maximum
    if np.count_nonzero(q == q.max()) != np.count_nonzero(moved == moved.max()):
        return
    assert epsilon_greedy(q, 0.0, rng) == epsilon_greedy(moved, 0.0, rng)


def test_explore_schedule():
    cfg = AgentConfig()
    assert explore_rate(0, 1000, cfg) == 1.0
    assert explore_rate(50, 1000, cfg) == pytest.approx(0.525)
    assert explore_rate(100, 1000, cfg) == pytest.approx(0.05)
    assert explore_rate(900, 1000, cfg) == pytest.approx(0.05)


def test_shaped_target_examples():
    assert shaped_target(1.0, 0.5, 2.0, 0.95, False, "literal") == pytest.approx(3.9)
    for mode in ("literal", "prose", "off"):
        assert shaped_target(-1.0, 0.0, 2.0, 0.95, False, mode) == pytest.approx(-1.0 + 1.9)
    assert shaped_target(1.0, 0.5, 2.0, 0.95, False, "prose") == pytest.approx(0.5 + 1.9)
    assert shaped_target(1.0, 0.5, 2.0, 0.95, True, "prose") == pytest.approx(0.5)


def test_literal_divisor_is_clamped():
    y = shaped_target(1.0, 0.999, 0.0, 0.95, True, "literal", clamp_delta=0.05)
    assert np.isfinite(y) and y == pytest.approx(1 / 0.05)


def test_shaped_target_rejects_bad_inputs():
    with pytest.raises(ValueError):
        shaped_target(1.0, 1.2, 0.0, 0.95, False, "prose")
    with pytest.raises(ValueError):
        shaped_target(1.0, -0.1, 0.0, 0.95, False, "literal")
    with pytest.raises(ValueError):
        shaped_target(1.0, 0.5, 0.0, 1.5, False, "prose")
    with pytest.raises(ValueError):
        shaped_target(1.0, 0.5, 0.0, 0.9, False, "halve")


@given(r=st.floats(0.01, 10), c1=unit, c2=unit, q=finite, gamma=unit, done=st.booleans())
def test_shaping_monotonicity(r, c1, c2, q, gamma, done):
    lo, hi = sorted((c1, c2))
    assert shaped_target(r, hi, q, gamma, done, "prose") <= shaped_target(r, lo, q, gamma, done, "prose")
    assert shaped_target(r, hi, q, gamma, done, "literal") >= shaped_target(r, lo, q, gamma, done, "literal")


@given(r=finite, q=finite, gamma=unit, done=st.booleans())
def test_zero_distance_reduces_to_plain_target(r, q, gamma, done):
    plain = shaped_target(r, 0.0, q, gamma, done, "off")
    assert plain == (r if done else r + gamma * q)
    assert shaped_target(r, 0.0, q, gamma, done, "prose") == plain
    assert shaped_target(r, 0.0, q, gamma, done, "literal") == plain


def test_array_targets_match_scalars():
    r = np.array([1.0, -1.0, 0.5])
    c = np.array([0.2, 0.7, 0.0])
    q = np.array([1.0, 2.0, 3.0])
    done = np.array([False, True, False])
    y = shaped_target(r, c, q, 0.9, done, "prose")
    assert [shaped_target(*args, 0.9, d, "prose") for *args, d in zip(r, c, q, done)] == pytest.approx(y)


def test_agent_config_validation():
    with pytest.raises(ValueError):
        AgentConfig(gamma=1.5)
    with pytest.raises(ValueError):
        AgentConfig(clamp_delta=0.5)
    with pytest.raises(ValueError):
        AgentConfig(shaping_mode="halve")
    assert AgentConfig(shaping_mode="off").uses_latent is False
    assert AgentConfig().uses_latent is True
    assert AgentConfig(shaping_mode="off", q_input="latent").uses_latent is True


def test_fixed_point_gives_zero_loss():
    agent = Agent(3, 2, AgentConfig(shaping_mode="off"), np.random.default_rng(0))
    last = len(agent.online.sizes) - 2
    agent.online.params[f"w{last}"][:] = 0
    agent.online.params[f"b{last}"][:] = 1
    batch = toy_batch(done=True)
    batch = batch._replace(rewards=np.ones(8, np.float32))
    assert dqn_update(agent, batch) == 0.0


def test_dqn_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    agent = Agent(3, 2, AgentConfig(hidden=(5,)), rng)
    agent.online = agent.online.astype(np.float64)
    batch = toy_batch(n=6)
    y = rng.normal(size=6)
    for v in agent.online.params.values():
        v += rng.uniform(-0.1, 0.1, size=v.shape)
    err = check_gradients(lambda p: dqn_loss(agent, p, batch.states.astype(np.float64), batch.actions, y),
                          agent.online.params)
    assert err < 1e-4


def test_target_network_only_moves_the_target():
    cfg = AgentConfig(shaping_mode="off")
    batch = toy_batch()
    a = Agent(3, 2, cfg, np.random.default_rng(0))
    b = Agent(3, 2, cfg, np.random.default_rng(0))
    for v in b.target.params.values():
        v += 1.0
    # same online params and identical targets give identical gradients
    y = np.zeros(len(batch.states))
    la, ga = dqn_loss(a, a.online.params, batch.states, batch.actions, y)
    lb, gb = dqn_loss(b, b.online.params, batch.states, batch.actions, y)
    assert la == lb and all(np.array_equal(ga[k], gb[k]) for k in ga)
    before = {k: v.copy() for k, v in b.target.params.items()}
    dqn_update(a, batch)
    dqn_update(b, batch)
    assert all(np.array_equal(before[k], b.target.params[k]) for k in before)
    assert not all(np.array_equal(a.online.params[k], b.online.params[k]) for k in before)


def test_sync_target():
    agent = Agent(3, 2, AgentConfig(), np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(4, 3))
    np.testing.assert_array_equal(agent.target(x), agent.online(x))
    dqn_update(agent, toy_batch(), cost=np.full(8, 0.5))
    assert not np.array_equal(agent.target(x), agent.online(x))
    sync_target(agent)
    np.testing.assert_array_equal(agent.target(x), agent.online(x))
    assert agent.optimizer.params is agent.online.params


def test_shaping_without_models_is_a_config_error():
    agent = Agent(3, 2, AgentConfig(), np.random.default_rng(0))
    with pytest.raises(ShapingConfigError):
        dqn_update(agent, toy_batch())
    with pytest.raises(ShapingConfigError):
        train_agent(Maze(size=3), Agent(18, 4, AgentConfig(), np.random.default_rng(0)), 10, np.random.default_rng(0))
    with pytest.raises(ValueError):
        dqn_update(agent, toy_batch(n=0))


def baseline_run(steps, seed=0):
    env = Maze(size=5)
    cfg = AgentConfig(shaping_mode="off", warmup=50, target_sync_every=100)
    agent = Agent(50, 4, cfg, np.random.default_rng(seed))
    rows = []
    res = train_agent(env, agent, steps, np.random.default_rng(seed + 1), sink=rows.append)
    return res, rows, agent


def test_zero_steps_emit_nothing():
    res, rows, _ = baseline_run(0)
    assert res.episodes == [] and rows == []


def test_training_is_deterministic():
    a, _, agent_a = baseline_run(1500)
    b, _, agent_b = baseline_run(1500)
    assert a.episodes == b.episodes and len(a.episodes) > 0
    assert all(np.array_equal(v, agent_b.online.params[k]) for k, v in agent_a.online.params.items())


def test_metrics_stream_matches_result():
    res, rows, _ = baseline_run(1500)
    assert rows == res.episodes
    times = [r.timestep for r in rows]
    assert times == sorted(times) and [r.episode for r in rows] == list(range(1, len(rows) + 1))
    assert rows[0].explore_eps > rows[-1].explore_eps


def test_baseline_learns_small_maze():
    res, _, _ = baseline_run(6000)
    tail = [e.episodic_return for e in res.episodes[-5:]]
    assert np.mean(tail) >= -8 - 2


def test_state_dict_round_trip():
    a = Agent(3, 2, AgentConfig(), np.random.default_rng(0))
    b = Agent(3, 2, AgentConfig(), np.random.default_rng(1))
    params = b.online.params
    b.load_state_dict(a.state_dict())
    assert b.online.params is params
    x = np.ones((1, 3))
    np.testing.assert_array_equal(a.online(x), b.online(x))
    assert set(k.split("/")[1] for k in a.state_dict()) == {"online", "target"}


def test_steps_to_threshold():
    eps = [EpisodeMetrics(100 * i, i, r, None, 0.0) for i, r in enumerate([-242, -100, -20, -18, -18, -18, -18], 1)]
    # normalised: 0, .63, .99, 1, 1, 1, 1 -> windows of 3: .54, .87, .997, ...
    assert steps_to_threshold(eps, -18, -242, window=3) == 500
    assert steps_to_threshold(eps[:2], -18, -242) is None
    with pytest.raises(ValueError):
        steps_to_threshold(eps, -242, -18)
