from collections import Counter

import numpy as np
import pytest

from config import EpisodeSpec, RewardScheme, TrainConfig
from dataset_ingest import ArrayDatasetView
from episode_env import EpisodeEnv, sample_episode
from lstm_q_model import forward_episode, init_params
from tensor_core import Rng
import trainer
from trainer import (
    Trajectory,
    bellman_dq,
    bellman_loss_and_grads,
    evaluate,
    frozen_bellman_loss_and_grads,
    gradient_check,
    rollout_batch,
    select_action,
    td_targets,
    train,
    train_supervised,
)


def _tiny_config(**overrides):
    base = dict(
        batch_size=4,
        episode=EpisodeSpec(steps=6, classes_per_episode=3, image_dim=4),
        hidden=8,
        total_batches=3,
        eval_batches=1,
        seed=5,
    )
    base.update(overrides)
    return TrainConfig(**base)


def _envs(view, spec, n, seed=0):
    rng = Rng(seed)
    return [EpisodeEnv(sample_episode(rng, spec, view), spec.rewards) for _ in range(n)]


def test_select_action_is_greedy_with_lowest_index_ties():
    rng = Rng(1)
    action = select_action(np.array([0.1, 0.5, 0.5, 0.2]), rng, epsilon=0.0)
    assert action.index == 1 and not action.is_request
    assert rng.uniform() == Rng(1).uniform()


def test_select_action_exploration_needs_the_true_slot():
    with pytest.raises(ValueError):
        select_action(np.zeros(4), Rng(0), epsilon=1.0)


def test_exploration_arms_are_equally_likely():
    rng = Rng(3)
    trials = 30_000
    arms = Counter()
    for _ in range(trials):
        a = select_action(np.zeros(4), rng, epsilon=1.0, true_slot=0)
        arms["request" if a.is_request else "correct" if a.index == 0 else "incorrect"] += 1
    sigma = np.sqrt(trials * (1 / 3) * (2 / 3))
    assert all(abs(arms[k] - trials / 3) < 4 * sigma for k in ("correct", "incorrect", "request"))


def test_exploration_with_one_class_splits_between_correct_and_request():
    rng = Rng(4)
    picks = Counter(select_action(np.zeros(2), rng, epsilon=1.0, true_slot=0).index for _ in range(10_000))
    assert set(picks) == {0, 1}
    assert abs(picks[0] - 5000) < 4 * np.sqrt(10_000 * 0.25)


def test_td_targets_bootstrap_from_the_next_step():
    traj = Trajectory(
        observations=np.zeros((2, 1)),
        actions=np.array([3, 0]),
        rewards=np.array([-0.05, 1.0]),
        q=np.array([[0.0, 0.0, 0.0, 0.0], [1.0, 0.2, -0.3, 0.0]]),
        requests=np.array([True, False]),
        correct=np.array([False, True]),
        instance_index=np.array([1, 2]),
    )
    assert td_targets(traj, 0.5) == pytest.approx([0.45, 1.0])
    assert td_targets(traj, 0.0).tolist() == [-0.05, 1.0]


def test_bellman_dq_single_step():
    loss, dq = bellman_dq(np.array([[0.3, 0.7]]), np.array([1]), np.array([0.2]))
    assert loss == pytest.approx(0.25)
    assert dq.tolist() == [[0.0, pytest.approx(1.0)]]


def test_bellman_loss_vanishes_when_targets_are_met():
    rng = Rng(2)
    params = init_params(rng, 4, 5, 3, scale=0.3)
    obs = rng.normal(1.0, (4, 5))
    actions = np.array([0, 2, 1, 2])
    q = forward_episode(params, obs).q
    targets = q[np.arange(4), actions]
    loss, grads = frozen_bellman_loss_and_grads(params, obs, actions, targets)
    assert loss == 0.0
    assert all(not arr.any() for _, arr in grads.blocks())


@pytest.mark.parametrize("hidden", [4, 8, 16])
def test_gradient_check_passes(hidden):
    errors = gradient_check(Rng(hidden), hidden)
    assert errors["max"] < 1e-6
    assert errors["max_entrywise"] < 1e-4


def test_gradient_check_flags_a_single_bad_entry(monkeypatch):
    exact = trainer.frozen_bellman_loss_and_grads

    def one_entry_off(*args):
        loss, grads = exact(*args)
        grads.w_in.reshape(-1)[0] += 1.0
        return loss, grads

    monkeypatch.setattr(trainer, "frozen_bellman_loss_and_grads", one_entry_off)
    errors = gradient_check(Rng(8), 8)
    assert errors["max_entrywise"] > 1e-2
    assert errors["max_entrywise"] >= errors["w_in"]


def test_zero_init_rollout_always_picks_slot_zero(tiny_view):
    spec = EpisodeSpec(steps=6, classes_per_episode=3, image_dim=4)
    params = init_params(Rng(0), 8, spec.observation_size, spec.action_count, scale=0.0)
    envs = _envs(tiny_view, spec, 3)
    batch = rollout_batch(params, envs, Rng(1), epsilon=0.0)
    assert len(batch) == 3
    for traj, env in zip(batch.trajectories, envs):
        assert traj.actions.tolist() == [0] * 6
        expected = np.where(env.episode.label_slots == 0, 1.0, -1.0)
        assert np.array_equal(traj.rewards, expected)


def test_returns_stay_within_reward_bounds(tiny_view):
    spec = EpisodeSpec(steps=6, classes_per_episode=3, image_dim=4)
    params = init_params(Rng(3), 8, spec.observation_size, spec.action_count, scale=1.0)
    batch = rollout_batch(params, _envs(tiny_view, spec, 10), Rng(2), epsilon=0.5)
    for traj in batch.trajectories:
        assert 6 * -1.0 <= traj.total_reward <= 6 * 1.0
        assert len(traj.actions) == 6


def test_rollout_is_deterministic_and_trace_matches_replay(tiny_view):
    spec = EpisodeSpec(steps=6, classes_per_episode=3, image_dim=4)
    params = init_params(Rng(3), 8, spec.observation_size, spec.action_count, scale=0.5)
    a = rollout_batch(params, _envs(tiny_view, spec, 4), Rng(9), epsilon=0.3)
    b = rollout_batch(params, _envs(tiny_view, spec, 4), Rng(9), epsilon=0.3)
    assert np.array_equal(a.actions, b.actions)
    for traj, trace in a:
        assert np.allclose(forward_episode(params, traj.observations).q, trace.q, atol=1e-12)


def test_parallel_rollout_keeps_every_episode(tiny_view):
    spec = EpisodeSpec(steps=6, classes_per_episode=3, image_dim=4)
    params = init_params(Rng(3), 8, spec.observation_size, spec.action_count)
    batch = rollout_batch(params, _envs(tiny_view, spec, 5), Rng(9), epsilon=0.3, workers=2)
    assert len(batch) == 5
    assert batch.trace.q.shape == (6, 5, 4)
    loss, _ = bellman_loss_and_grads(params, batch)
    assert np.isfinite(loss)


def test_training_is_bit_reproducible(tiny_view):
    config = _tiny_config(total_batches=100, log_every=50)
    first = train(config, tiny_view, tiny_view)
    second = train(config, tiny_view, tiny_view)
    assert len(first.losses) == 100
    assert first.losses == second.losses
    for (name, a), (_, b) in zip(first.params.blocks(), second.params.blocks()):
        assert np.array_equal(a, b), name


def test_resumed_training_matches_an_uninterrupted_run(tiny_view):
    full = train(_tiny_config(total_batches=4), tiny_view, tiny_view)
    half = train(_tiny_config(total_batches=2), tiny_view, tiny_view)
    resumed = train(_tiny_config(total_batches=4), tiny_view, tiny_view, params=half.params, adam=half.adam)
    assert resumed.adam.t == 4
    assert half.losses + resumed.losses == full.losses
    for (name, a), (_, b) in zip(full.params.blocks(), resumed.params.blocks()):
        assert np.array_equal(a, b), name


def test_zero_batches_still_evaluates(tiny_view):
    result = train(_tiny_config(total_batches=0, eval_batches=2), tiny_view, tiny_view)
    assert result.losses == []
    assert len(result.eval_records) == 2
    assert result.eval_records[0].split == "test"
    assert result.eval_counts.episodes == 8


def test_evaluation_is_reproducible(tiny_view):
    config = _tiny_config()
    params = init_params(Rng(1), 8, 7, 4)
    a, _ = evaluate(params, tiny_view, config, batches=2)
    b, _ = evaluate(params, tiny_view, config, batches=2)
    assert a.to_dict() == b.to_dict()


def test_one_step_two_action_task_learns_exact_values():
    view = ArrayDatasetView({0: np.full((5, 2, 2), 0.5)})
    config = TrainConfig(
        batch_size=20,
        episode=EpisodeSpec(
            steps=1, classes_per_episode=1, image_dim=4, rewards=RewardScheme(r_req=-1.0, r_cor=1.0, r_inc=-1.0)
        ),
        gamma=0.0,
        epsilon=0.5,
        hidden=8,
        total_batches=2000,
        eval_batches=1,
        lr=2e-3,
        log_every=1000,
    )
    result = train(config, view, view)
    q = forward_episode(result.params, np.array([[0.5, 0.5, 0.5, 0.5, 0.0]])).q[0]
    assert q[0] == pytest.approx(1.0, abs=0.05)
    assert q[1] == pytest.approx(-1.0, abs=0.05)


def test_overpaid_requests_make_the_policy_always_ask(tiny_view):
    config = _tiny_config(
        episode=EpisodeSpec(
            steps=6, classes_per_episode=3, image_dim=4, rewards=RewardScheme(r_req=2.0, r_cor=1.0, r_inc=-1.0)
        ),
        batch_size=10,
        epsilon=0.2,
        total_batches=200,
        eval_batches=2,
        lr=1e-2,
        log_every=100,
    )
    result = train(config, tiny_view, tiny_view)
    assert result.eval_counts.request_rate == 1.0


def test_supervised_softmax_rows_are_normalised(tiny_view):
    result = train_supervised(_tiny_config(total_batches=5, eval_batches=2), tiny_view, tiny_view)
    assert result.max_softmax_error < 1e-12
    assert 0.0 <= result.accuracy <= 1.0
    assert result.counts.request_rate == 0.0
    assert result.params.action_count == 3
