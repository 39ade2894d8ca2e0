import numpy as np
import pytest

from latentplan.env_data import (REFERENCE_RETURNS, DatasetError, Dataset, NormStats, build_dataset, chain_toy,
                                 clamp_actions, enumerate_dataset, load_dataset, make_env, make_policy,
                                 measure_reference_returns, normalized_score, reward_to_go, rollout, save_dataset,
                                 step)


def test_reward_to_go_examples():
    np.testing.assert_allclose(reward_to_go([1, 1, 1], 0.5), [1.75, 1.5, 1.0])
    r = np.array([0.3, -1.0, 2.0, 0.5])
    np.testing.assert_array_equal(reward_to_go(r, 0.0), r)
    np.testing.assert_allclose(reward_to_go(r, 1.0), np.cumsum(r[::-1])[::-1])
    assert reward_to_go([], 0.9).shape == (0,)


def test_zero_policy_is_a_fixed_point():
    env = make_env("pointmass2d")
    tr = rollout(env, "zero", seed=5)
    assert np.all(tr.states == tr.states[0])
    assert np.all(tr.rewards == tr.rewards[0])
    dist = np.linalg.norm(tr.states[0, :2] - np.asarray(env.goal))
    assert tr.rewards[0] == pytest.approx(-env.reward_scale * dist)


def test_rollout_is_deterministic():
    env = make_env("pointmass2d")
    a = rollout(env, "medium", seed=11)
    b = rollout(env, "medium", seed=11)
    assert a.to_json() == b.to_json()
    assert rollout(env, "medium", seed=12).to_json() != a.to_json()


def test_expert_reaches_goal():
    env = make_env("pointmass2d")
    for seed in range(5):
        tr = rollout(env, "expert", seed)
        s, _ = step(env, tr.states[-1:], tr.actions[-1:])
        assert np.linalg.norm(s[0, :2] - np.asarray(env.goal)) < env.goal_radius


def test_expert_matches_independent_simulation():
    # closed-form saturated PD controller integrated by hand
    env = make_env("pointmass2d")
    tr = rollout(env, "expert", seed=3)
    p, v = tr.states[0, :2].copy(), np.zeros(2)
    for t in range(env.horizon):
        a = np.clip(8.0 * (0.0 - p) - 5.0 * v, -1, 1)
        np.testing.assert_allclose(tr.actions[t], a, atol=1e-12)
        p, v = p + env.dt * v, v + env.dt * a
    assert np.linalg.norm(p) < env.goal_radius


def test_rtg_recursion_on_stored_trajectories():
    env = make_env("pointmass2d")
    ds = build_dataset(env, [("medium", 1.0)], 6, seed=0)
    for tr in ds.trajectories:
        g = np.append(tr.rtg, 0.0)
        assert np.max(np.abs(g[:-1] - (tr.rewards + env.gamma * g[1:]))) < 1e-9


def test_out_of_bounds_actions_are_clamped_and_counted():
    env = make_env("pointmass2d")
    a, n = clamp_actions(env, np.array([[2.0, 0.0], [0.5, -0.5], [-3.0, 3.0]]))
    np.testing.assert_array_equal(a, [[1.0, 0.0], [0.5, -0.5], [-1.0, 1.0]])
    assert n == 2

    class Wild:
        name = "wild"

        def reset(self, env, rng):
            pass

        def act(self, env, state, rng):
            return np.array([5.0, -5.0])

    tr = rollout(env, Wild(), seed=0)
    assert tr.clamp_count == env.horizon
    assert np.all(np.abs(tr.actions) <= 1.0)


def test_build_dataset_mixture_and_tags():
    env = make_env("pointmass2d")
    ds = build_dataset(env, [("expert", 1.0)], 3, seed=1)
    assert ds.quality_tag == "expert"
    assert all(t.policy == "expert" for t in ds.trajectories)

    env = make_env("pointmass2d", horizon=4)
    ds = build_dataset(env, [("random", 0.5), ("expert", 0.5)], 1000, seed=2)
    frac = np.mean([t.policy == "expert" for t in ds.trajectories])
    assert abs(frac - 0.5) <= 0.05
    assert ds.quality_tag == "mixed"


def test_build_dataset_errors():
    env = make_env("pointmass2d")
    with pytest.raises(DatasetError, match="empty dataset"):
        build_dataset(env, [("expert", 1.0)], 0, seed=0)
    with pytest.raises(DatasetError):
        build_dataset(env, [("expert", 0.7)], 2, seed=0)


def test_single_trajectory_floors_std():
    env = make_env("pointmass2d")
    ds = build_dataset(env, [("zero", 1.0)], 1, seed=0)
    assert len(ds) == 1
    for ch in ("states", "actions"):
        assert np.all(ds.norm.std[ch] >= ds.norm.floor)
    assert np.all(ds.norm.std["actions"] == ds.norm.floor)


def test_normalization_roundtrip_and_moments():
    env = make_env("pointmass2d")
    ds = build_dataset(env, [("medium", 1.0)], 8, seed=4)
    for ch in ("states", "actions", "rewards", "rtg"):
        x = np.concatenate([np.asarray(getattr(t, ch)).reshape(t.T, -1) for t in ds.trajectories])
        z = ds.norm.normalize(ch, x)
        np.testing.assert_allclose(ds.norm.denormalize(ch, z), x, atol=1e-10)
        assert np.all(np.abs(z.mean(0)) < 1e-8)
        assert np.all(np.abs(z.std(0) - 1.0) < 1e-8)


def test_normalized_score():
    assert normalized_score(5.0, 1.0, 5.0) == 100.0
    assert normalized_score(1.0, 1.0, 5.0) == 0.0
    assert normalized_score(3.0, 1.0, 5.0) == 50.0
    with pytest.raises(DatasetError, match="degenerate reference"):
        normalized_score(1.0, 2.0, 2.0)


def test_reference_returns_are_current():
    for name in ("pointmass2d", "chain_sparse"):
        got = measure_reference_returns(make_env(name))
        for k, v in REFERENCE_RETURNS[name].items():
            assert got[k] == pytest.approx(v, rel=1e-12, abs=1e-12)


def test_dataset_persistence(tmp_path):
    env = make_env("chain_sparse", horizon=16)
    ds = build_dataset(env, [("medium", 1.0)], 4, seed=9)
    digest = save_dataset(ds, tmp_path / "d.jsonl")
    again = load_dataset(tmp_path / "d.jsonl")
    assert save_dataset(again, tmp_path / "e.jsonl") == digest
    assert (tmp_path / "d.jsonl").read_bytes() == (tmp_path / "e.jsonl").read_bytes()
    for a, b in zip(ds.trajectories, again.trajectories):
        np.testing.assert_array_equal(a.states, b.states)
        np.testing.assert_array_equal(a.rtg, b.rtg)
    assert again.env == env

    raw = bytearray((tmp_path / "d.jsonl").read_bytes())
    raw[20] ^= 1
    (tmp_path / "d.jsonl").write_bytes(bytes(raw))
    with pytest.raises(DatasetError, match="content hash"):
        load_dataset(tmp_path / "d.jsonl")


def test_chain_toy_enumeration():
    env = chain_toy()
    ds = enumerate_dataset(env, [np.array([0.0, 0.0])])
    assert len(ds) == 3 ** env.horizon
    best = max(t.episode_return for t in ds.trajectories)
    assert best == 1.0
    # the goal is two cells (four half-steps) away: only +1 everywhere succeeds
    winners = [t for t in ds.trajectories if t.episode_return == best]
    assert len(winners) == 1 and np.all(winners[0].actions == 1.0)


def test_unknown_env_and_policy():
    with pytest.raises(ValueError):
        make_env("nope")
    with pytest.raises(ValueError):
        make_policy(make_env("pointmass2d"), "nope")
