import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import spearmanr

from costnet.costmodel import (
    CostModel,
    DistanceLabel,
    agreement_counts,
    agreement_rate,
    backtrack,
    cost_train_step,
    goal_episodes,
    holdout_pairs,
    label_distances,
    make_pairs,
    pair_targets,
    read_labels,
    sample_pairs,
    shortest_labels,
    train_costnet,
    write_labels,
)
from costnet.envs import Maze
from costnet.mdp import Episode, Transition
from costnet.nn import Adam

UP, DOWN, LEFT, RIGHT = range(4)


def chain(n: int, goal: bool = True) -> Episode:
    """Episode over scalar states 0..n, the last transition reaching the goal."""
    ts = [Transition(np.array([float(i)]), 0, -1.0, np.array([float(i + 1)]), goal and i == n - 1) for i in range(n)]
    return Episode(ts, reached_goal=goal)


def walk(env: Maze, actions) -> Episode:
    s = env.reset()
    ts = []
    for a in actions:
        s2, r, done = env.step(a)
        ts.append(Transition(s, a, r, s2, done))
        s = s2
    return Episode(ts, reached_goal=env.is_goal_transition(ts[-1]))


def test_distance_label_range():
    DistanceLabel(np.zeros(2), 0.0)
    with pytest.raises(ValueError):
        DistanceLabel(np.zeros(2), 1.5)


def test_backtrack_terminal_and_arithmetic():
    states, dist = backtrack(chain(5), normalizer=20)
    assert dist[-1] == 0.0
    assert dist[0] == 0.25
    assert states[-1][0] == 5.0


def test_backtrack_caps_at_normalizer():
    _, dist = backtrack(chain(30), normalizer=20)
    assert dist[0] == 1.0 and dist[10] == 1.0 and dist[11] == 19 / 20


def test_backtrack_rejects_failed_episode_and_bad_normalizer():
    with pytest.raises(ValueError):
        backtrack(chain(3, goal=False), 10)
    with pytest.raises(ValueError):
        backtrack(chain(3), 0)


def test_labels_on_optimal_maze_path_match_bfs():
    env = Maze()
    ep = walk(env, [RIGHT] * 10 + [DOWN] * 10)
    labels = label_distances(ep, env.spec.max_episode_steps)
    assert len(labels) == 21
    for lab in labels:
        state = lab.latent.reshape(11, 11, 2)
        assert lab.distance == env.optimal_distance(state) / env.spec.max_episode_steps


def test_label_distances_uses_encoder():
    labels = label_distances(chain(3), 3, encode=lambda s: s * 10)
    assert [float(lab.latent[0]) for lab in labels] == [0.0, 10.0, 20.0, 30.0]


@settings(max_examples=50, deadline=None)
@given(n=st.integers(1, 60), normalizer=st.integers(1, 80))
def test_labels_are_valid_and_non_increasing(n, normalizer):
    _, dist = backtrack(chain(n), normalizer)
    assert np.all((dist >= 0) & (dist <= 1))
    assert np.all(np.diff(dist) <= 0)
    assert np.count_nonzero(dist == 0) == 1


def test_goal_episodes_splits_at_goal_transitions():
    ts = [Transition(np.array([float(i)]), 0, 0.0, np.array([float(i + 1)]), i == 5) for i in range(6)]
    ep = Episode(ts)
    segs = goal_episodes([ep], is_goal=lambda t: t.state[0] in (2.0, 5.0))
    assert [len(s) for s in segs] == [3, 3]
    assert all(s.reached_goal and s.transitions[-1].done for s in segs)
    assert goal_episodes([chain(4, goal=False)], is_goal=lambda t: False) == []


def test_shortest_labels_keep_minimum():
    # state 0 seen 3 steps and 1 step before the goal
    long = chain(3)
    short = Episode([Transition(np.array([0.0]), 0, -1.0, np.array([3.0]), True)], reached_goal=True)
    states, dist = shortest_labels([long, short], normalizer=3)
    got = {float(s[0]): d for s, d in zip(states, dist)}
    assert got == {0.0: 1 / 3, 1.0: 2 / 3, 2.0: 1 / 3, 3.0: 0.0}
    empty_states, empty = shortest_labels([], 3)
    assert len(empty) == 0


def test_make_pairs_examples():
    labels = [DistanceLabel(np.array([0.0]), 0.0), DistanceLabel(np.array([1.0]), 0.5)]
    pairs = make_pairs(labels, 4, np.random.default_rng(0))
    assert len(pairs) == 8
    for p in pairs:
        if p.latent_a[0] == 0.0:
            assert p.label == (1.0, 0.0)
        else:
            assert p.label == (0.0, 1.0)


def test_make_pairs_rejects_equal_labels():
    labels = [DistanceLabel(np.array([float(i)]), 0.3) for i in range(5)]
    with pytest.raises(ValueError):
        make_pairs(labels, 3, np.random.default_rng(0))


@settings(max_examples=50, deadline=None)
@given(dist=st.lists(st.sampled_from([0.0, 0.1, 0.25, 0.5, 1.0]), min_size=2, max_size=30), seed=st.integers(0, 999))
def test_pairs_are_symmetric_and_strict(dist, seed):
    if len(set(dist)) < 2:
        return
    labels = [DistanceLabel(np.array([float(i)]), d) for i, d in enumerate(dist)]
    pairs = make_pairs(labels, 10, np.random.default_rng(seed))
    for fwd, back in zip(pairs[::2], pairs[1::2]):
        da, db = dist[int(fwd.latent_a[0])], dist[int(fwd.latent_b[0])]
        assert da != db
        assert fwd.label == ((1.0, 0.0) if da < db else (0.0, 1.0))
        assert back.latent_a is fwd.latent_b and back.label == fwd.label[::-1]


def test_sample_pairs_honours_exclusion():
    d = np.array([0.0, 0.5, 1.0])
    exclude = np.array([0 * 3 + 1, 1 * 3 + 2])
    a, b = sample_pairs(d, 50, np.random.default_rng(0), exclude)
    assert set(zip(np.minimum(a, b), np.maximum(a, b))) == {(0, 2)}


def test_holdout_pairs_are_unique_and_distinct():
    d = np.arange(10) / 10
    ia, ib, keys = holdout_pairs(d, np.random.default_rng(0), fraction=0.2)
    assert len(ia) == 9 == len(keys) == len(set(keys.tolist()))
    assert np.all(d[ia] != d[ib])


def test_pair_targets():
    np.testing.assert_array_equal(pair_targets([0.1, 0.5], [0.2, 0.4]), [[1, 0], [0, 1]])


def test_heads_respect_their_ranges():
    rng = np.random.default_rng(0)
    model = CostModel(8, rng)
    za, zb = rng.normal(size=(2, 50, 8)) * 10
    p = model.ordinal_forward(za, zb)
    assert np.all(p >= 0) and np.allclose(p.sum(axis=1), 1, atol=1e-6)
    d = model.distance_forward(za)
    assert np.all((d > 0) & (d < 1))
    assert isinstance(model.distance_forward(za[0]), float)
    with pytest.raises(ValueError):
        model.ordinal_forward(za, zb[:, :4])
    with pytest.raises(ValueError):
        model.distance_forward(np.zeros(3))


class _Oracle:
    def __init__(self, dist):
        self.dist = dist

    def ordinal_forward(self, za, zb):
        a = self.dist[za[:, 0].astype(int)] < self.dist[zb[:, 0].astype(int)]
        return np.stack([a, ~a], axis=1).astype(float)

    def distance_forward(self, z):
        return self.dist[z[:, 0].astype(int)]


def test_agreement_of_perfect_heads_is_one():
    dist = np.linspace(0, 1, 6)
    labels = [DistanceLabel(np.array([float(i)]), d) for i, d in enumerate(dist)]
    pairs = make_pairs(labels, 20, np.random.default_rng(0))
    assert agreement_rate(_Oracle(dist), pairs) == 1.0


def test_agreement_with_constant_head1_is_zero():
    model = CostModel(3, np.random.default_rng(0))
    last = len(model.head1.sizes) - 2
    model.head1.params[f"w{last}"][:] = 0
    model.head1.params[f"b{last}"][:] = 0
    rng = np.random.default_rng(1)
    labels = [DistanceLabel(rng.normal(size=3), d) for d in (0.0, 0.3, 0.6, 0.9)]
    assert agreement_rate(model, make_pairs(labels, 10, rng)) == 0.0
    with pytest.raises(ValueError):
        agreement_rate(model, [])


def test_agreement_counts_are_three_way():
    dist = np.array([0.0, 0.5])
    oracle = _Oracle(dist)
    za, zb = np.array([[0.0]]), np.array([[1.0]])
    assert agreement_counts(oracle, za, zb, [True]).tolist() == [True]
    # a wrong ground truth breaks agreement even when the heads concur
    assert agreement_counts(oracle, za, zb, [False]).tolist() == [False]


def maze5_oracle():
    env = Maze(size=5)
    pos = env.positions()
    states = np.stack([env.observation_at(p) for p in pos]).reshape(len(pos), -1).astype(np.float32)
    dist = np.array([env.optimal_distance(p) for p in pos]) / env.spec.max_episode_steps
    return env, pos, states, dist


def test_both_losses_decrease_on_oracle_labels():
    _, _, z, d = maze5_oracle()
    rng = np.random.default_rng(0)
    model = CostModel(z.shape[1], rng)
    opt0, opt1 = Adam(model.head0.params), Adam(model.head1.params)
    losses = []
    for _ in range(500):
        ia, ib = sample_pairs(d, 32, rng)
        idx = rng.integers(0, len(d), size=32)
        losses.append(cost_train_step(model, (z[ia], z[ib], pair_targets(d[ia], d[ib])), (z[idx], d[idx]), opt0, opt1))
    losses = np.array(losses)
    for k in range(2):
        avg = np.convolve(losses[:, k], np.ones(50) / 50, mode="valid")
        assert avg[-1] < 0.5 * avg[0]
    with pytest.raises(ValueError):
        cost_train_step(model, (z[:0], z[:0], np.zeros((0, 2))), (z[:0], d[:0]), opt0, opt1)


def test_trained_maze_model_matches_bfs():
    env, pos, z, d = maze5_oracle()
    model = CostModel(z.shape[1], np.random.default_rng(1))
    res = train_costnet(model, z, d, np.random.default_rng(2), max_steps=5000)
    assert res.passed and res.steps <= 5000
    assert all(row["agreement"] >= 0.9 for row in res.history[-3:])
    pred = model.distance_forward(z)
    assert spearmanr(pred, d).statistic >= 0.9
    assert pred[pos.index((4, 4))] < 0.1


def test_label_csv_round_trip(tmp_path):
    z = np.random.default_rng(0).normal(size=(4, 3))
    d = np.array([0.0, 0.25, 0.5, 1.0])
    write_labels(tmp_path / "labels.csv", z, d)
    header = (tmp_path / "labels.csv").read_text().splitlines()[0]
    assert header == "latent_0,latent_1,latent_2,distance"
    z2, d2 = read_labels(tmp_path / "labels.csv")
    np.testing.assert_allclose(z2, z, rtol=1e-8)
    np.testing.assert_array_equal(d2, d)


def test_state_dict_prefixes_and_round_trip():
    a = CostModel(4, np.random.default_rng(0))
    b = CostModel(4, np.random.default_rng(1))
    sd = a.state_dict()
    assert {k.split("/")[1] for k in sd} == {"head0", "head1"}
    b.load_state_dict(sd)
    z = np.ones((2, 4))
    np.testing.assert_array_equal(a.distance_forward(z), b.distance_forward(z))
