import math

import numpy as np
import pytest

from costnet.envs import MOVES, CartPole, EpisodeFinishedError, GoldCollect, Maze, make_env

UP, DOWN, LEFT, RIGHT = range(4)


def test_maze_reset_observation():
    env = Maze()
    obs = env.reset()
    assert obs.shape == (11, 11, 2)
    assert obs[..., 0].sum() == 1 and obs[0, 0, 0] == 1
    assert obs[..., 1].sum() == 1 and obs[10, 10, 1] == 1
    assert env.spec.max_episode_steps == 242


def test_maze_border_is_a_no_op():
    env = Maze()
    env.reset()
    obs, r, done = env.step(LEFT)
    assert Maze.agent_position(obs) == (0, 0) and r == -1.0 and not done


def test_maze_shortest_path_return():
    env = Maze()
    env.reset()
    total, done = 0.0, False
    for a in [DOWN] * 10 + [RIGHT] * 10:
        _, r, done = env.step(a)
        total += r
    assert done and total == env.spec.optimal_return == -18.0


def test_maze_step_cap_and_finished_episode():
    env = Maze(size=3)
    env.reset()
    done = False
    steps = 0
    while not done:
        _, _, done = env.step(UP)
        steps += 1
    assert steps == 18
    with pytest.raises(EpisodeFinishedError):
        env.step(UP)
    with pytest.raises(ValueError):
        Maze(size=3).step(4)


def test_maze_optimal_distance_matches_manhattan():
    env = Maze()
    assert env.optimal_distance((10, 10)) == 0
    assert env.optimal_distance((0, 0)) == 20
    assert env.optimal_distance((10, 9)) == 1
    for pos in env.positions():
        assert env.optimal_distance(pos) == (10 - pos[0]) + (10 - pos[1])
    assert env.optimal_distance(env.observation_at((3, 4))) == 13


def test_maze_walls_change_distances():
    env = Maze(size=3, walls=[(0, 1), (1, 1)])
    assert env.optimal_distance((0, 0)) == 4
    env.reset()
    obs, _, _ = env.step(RIGHT)
    assert Maze.agent_position(obs) == (0, 0)


def test_maze_determinism():
    a, b = Maze(), Maze()
    a.reset(1), b.reset(1)
    rng = np.random.default_rng(0)
    for act in rng.integers(0, 4, size=100):
        assert np.array_equal(a.step(act)[0], b.step(act)[0])


def _collect_all(env: GoldCollect) -> float:
    """Walk to the nearest remaining gold tile until none is left."""
    total, done = 0.0, False
    while not done:
        target = min(env.gold - {env.agent}, key=lambda g: abs(g[0] - env.agent[0]) + abs(g[1] - env.agent[1]),
                     default=None)
        if target is None:
            # only the tile under the agent is left: step off and back on
            off = DOWN if env.agent[0] == 0 else UP
            back = UP if off == DOWN else DOWN
            for a in (off, back):
                _, r, done = env.step(a)
                total += r
            continue
        dr, dc = target[0] - env.agent[0], target[1] - env.agent[1]
        a = (DOWN if dr > 0 else UP) if dr else (RIGHT if dc > 0 else LEFT)
        _, r, done = env.step(a)
        total += r
    return total


def test_goldcollect_perfect_play_returns_1000():
    env = GoldCollect()
    env.reset(seed=3)
    assert env.collected == 0
    total = _collect_all(env)
    assert total == 1000.0 == env.spec.optimal_return
    assert env.steps <= env.spec.max_episode_steps


def test_goldcollect_sparse_layout_is_seeded():
    a, b = GoldCollect(gold_count=10), GoldCollect(gold_count=10)
    assert np.array_equal(a.reset(seed=5), b.reset(seed=5))
    assert len(a.gold) == 10
    assert 0 <= _collect_all(a) <= 1000


def test_goldcollect_optimal_distance():
    env = GoldCollect(size=5, gold_count=1)
    env.reset(seed=0)
    (g,) = env.gold
    expected = abs(g[0] - env.agent[0]) + abs(g[1] - env.agent[1])
    assert env.optimal_distance() == expected
    assert env.optimal_distance(env.observation()) == expected


def test_cartpole_rejects_optimal_distance():
    with pytest.raises(NotImplementedError):
        CartPole().optimal_distance()


def test_cartpole_reset_is_seeded_and_bounded():
    a, b = CartPole(), CartPole()
    sa, sb = a.reset(seed=9), b.reset(seed=9)
    assert np.array_equal(sa, sb)
    assert np.all(np.abs(sa) <= 0.05)


def test_cartpole_single_euler_step_by_hand():
    # state (x, x_dot, theta, theta_dot) = (0, 0, 0.1, 0), push right
    g, mc, mp, l, f, dt = 9.8, 1.0, 0.1, 0.5, 10.0, 0.02
    theta = 0.1
    total = mc + mp
    temp = f / total
    theta_acc = (g * math.sin(theta) - math.cos(theta) * temp) / (l * (4 / 3 - mp * math.cos(theta) ** 2 / total))
    x_acc = temp - mp * l * theta_acc * math.cos(theta) / total
    nxt = CartPole.dynamics([0.0, 0.0, theta, 0.0], 1)
    np.testing.assert_allclose(nxt, [0.0, dt * x_acc, theta, dt * theta_acc], rtol=1e-12)
    # worked by hand: theta_acc = (0.9784 - 9.0455) / 0.6217, x_acc = 9.0909 + 0.5870
    assert abs(theta_acc + 12.977) < 1e-3 and abs(x_acc - 9.678) < 1e-3


def test_cartpole_left_push_at_rest():
    nxt = CartPole.dynamics([0.0, 0.0, 0.0, 0.0], 0)
    # upright pole: theta_acc = force / (total * l * (4/3 - mp/total))
    theta_acc = 10.0 / 1.1 / (0.5 * (4 / 3 - 0.1 / 1.1))
    x_acc = -10.0 / 1.1 - 0.1 * 0.5 * theta_acc / 1.1
    np.testing.assert_allclose(nxt, [0, 0.02 * x_acc, 0, 0.02 * theta_acc], rtol=1e-12)


def test_cartpole_balancing_controller_survives_500():
    env = CartPole()
    obs = env.reset(seed=0)
    total, done = 0.0, False
    while not done:
        x, x_dot, theta, theta_dot = obs
        a = int(theta + 0.5 * theta_dot + 0.01 * x + 0.1 * x_dot > 0)
        obs, r, done = env.step(a)
        total += r
    assert total == 500.0 and env.steps == 500
    assert not env.out_of_bounds(env.state)


def test_cartpole_terminates_at_bounds():
    env = CartPole()
    env.reset(seed=1)
    done, prev = False, None
    while not done:
        prev = env.state.copy()
        _, _, done = env.step(1)
    assert env.steps < 500
    assert abs(env.state[2]) > 12 * math.pi / 180 or abs(env.state[0]) > 2.4
    assert abs(prev[2]) <= 12 * math.pi / 180 and abs(prev[0]) <= 2.4


def test_make_env():
    assert isinstance(make_env("maze", size=5), Maze)
    assert make_env("goldcollect").spec.optimal_return == 1000
    with pytest.raises(ValueError):
        make_env("pong")
    assert MOVES[UP] == (-1, 0)
