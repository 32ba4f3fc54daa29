import numpy as np
import pytest
from hypothesis import given, strategies as st

from drwbc.envsim import (
    episode_returns, evaluate_policy, evaluation_starts, expert_policy, generate_expert_dataset,
    generate_random_dataset, initial_states, make_env, rollout, rollout_results, scripted_expert, step, zero_policy,
)


@pytest.fixture(scope="module")
def pm():
    return make_env("point_mass_2d")


def test_presets():
    pm, di = make_env("point_mass_2d"), make_env("double_integrator_1d")
    assert (pm.T, pm.d_a, pm.d_s) == (50, 2, 4)
    assert (di.T, di.d_a, di.d_s) == (30, 1, 2)
    assert pm.noise_std == pytest.approx(0.05 * 4.0)
    with pytest.raises(ValueError):
        make_env("cartpole")
    with pytest.raises(ValueError):
        make_env("point_mass_2d", a_min=1.0, a_max=0.0)


def test_reward_zero_at_goal(pm):
    nxt, r = step(pm, np.zeros(4), np.zeros(2))
    assert r == 0.0
    assert np.array_equal(nxt, np.zeros(4))


def test_euler_update(pm):
    nxt, r = step(pm, np.zeros(4), np.array([1.0, 0.0]))
    assert nxt[2] == pytest.approx(0.05)
    assert nxt[0] == pytest.approx(0.05 * 0.05)
    assert nxt[1] == 0.0 and nxt[3] == 0.0
    assert r == pytest.approx(-0.01)


def test_step_clips_and_rejects_nan(pm):
    nxt, r = step(pm, np.zeros(4), np.array([10.0, -10.0]))
    assert np.allclose(nxt[2:], [0.1, -0.1])
    assert r == pytest.approx(-0.01 * 8)
    with pytest.raises(ValueError, match="non-finite"):
        step(pm, np.zeros(4), np.array([np.nan, 0.0]))


def test_zero_action_from_rest_is_constant(pm):
    start = np.array([[0.3, -0.4, 0.0, 0.0]])
    states, _, rewards = rollout(pm, zero_policy(pm), start)
    assert np.all(states[0] == start[0])
    assert rewards.sum() == pytest.approx(-50 * 0.5)


def test_expert_equilibrium_and_saturation(pm):
    assert np.array_equal(scripted_expert(pm, np.zeros(4)), np.zeros(2))
    a = scripted_expert(pm, np.array([-5.0, 0.0, 0.0, 0.0]))
    assert a[0] == pm.a_max


def test_expert_reaches_goal(pm):
    starts = evaluation_starts(pm, 200, seed=3)
    res = rollout_results(pm, *rollout(pm, expert_policy(pm), starts))
    assert np.mean([r.success for r in res]) >= 0.95
    for r in res[:5]:
        assert r.return_sum == pytest.approx(float(np.sum(r.trajectory.rewards)))


def test_generation_deterministic_and_shapes(pm):
    a = generate_expert_dataset(pm, 100, 0)
    b = generate_expert_dataset(pm, 100, 0)
    assert a == b
    one = generate_expert_dataset(pm, 1, 0)
    assert len(one) == 1 and one[0].T == pm.T and one[0].states.shape == (51, 4)
    assert all(t.tag == "clean" for t in a)


def _mean_cost(data):
    return -np.mean([t.rewards.sum() for t in data])


def test_expert_beats_random_on_both_envs():
    for env_id in ("point_mass_2d", "double_integrator_1d"):
        env = make_env(env_id)
        assert _mean_cost(generate_expert_dataset(env, 100, 0)) < _mean_cost(
            generate_random_dataset(env, 100, 0))


def test_expert_five_times_cheaper_than_random_double_integrator():
    env = make_env("double_integrator_1d")
    expert = _mean_cost(generate_expert_dataset(env, 100, 0))
    rand = _mean_cost(generate_random_dataset(env, 100, 0))
    assert rand >= 5.0 * expert


def test_zero_policy_evaluation_is_closed_form():
    env = make_env("point_mass_2d", start_vel=(0.0, 0.0))
    starts = evaluation_starts(env, 20, seed=4)
    expected = -env.T * np.linalg.norm(starts[:, :2], axis=1)
    mean, se = evaluate_policy(env, zero_policy(env), 20, seed=4)
    assert mean == pytest.approx(expected.mean(), rel=1e-12)
    assert se == pytest.approx(expected.std(ddof=1) / np.sqrt(20), rel=1e-12)


def test_expert_evaluation_matches_generation():
    # generation adds action noise; with it switched off the two paths share starts and dynamics
    env = make_env("point_mass_2d", noise_std=0.0)
    data = generate_expert_dataset(env, 200, 1)
    gen_mean = np.mean([t.rewards.sum() for t in data])
    starts = initial_states(env, 1, 200)
    _, _, rewards = rollout(env, expert_policy(env), starts)
    assert abs(rewards.sum(axis=1).mean() - gen_mean) <= 0.01 * abs(gen_mean)


def test_expert_evaluation_close_to_noisy_generation(pm):
    data = generate_expert_dataset(pm, 1000, 1)
    gen_mean = np.mean([t.rewards.sum() for t in data])
    mean, se = evaluate_policy(pm, expert_policy(pm), 1000, seed=1)
    assert abs(mean - gen_mean) <= 3 * se


def test_single_rollout_has_zero_stderr(pm):
    assert evaluate_policy(pm, expert_policy(pm), 1, 0)[1] == 0.0


def test_non_finite_policy_names_rollout(pm):
    def bad(s):
        a = np.zeros((len(s), 2))
        a[2] = np.inf
        return a
    with pytest.raises(ValueError, match="rollout 2"):
        episode_returns(pm, bad, 4, 0)


@given(st.lists(st.floats(-3, 3), min_size=4, max_size=4), st.lists(st.floats(-5, 5), min_size=2, max_size=2))
def test_actions_recorded_in_bounds(state, action):
    pm = make_env("point_mass_2d")
    _, acts, rewards = rollout(pm, lambda s: np.tile(action, (len(s), 1)), np.array([state]))
    assert np.all(acts >= pm.a_min) and np.all(acts <= pm.a_max)
    assert np.all(rewards <= 0.0)
