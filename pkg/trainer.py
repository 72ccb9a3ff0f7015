from __future__ import annotations

# trainer.py
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from config import TrainConfig
from dataset_ingest import DatasetView
from episode_env import Action, EpisodeEnv, ProtocolError, instance_index, sample_episode, supervised_observations
from guardrails import config_guardrail, loss_guardrail
from lstm_q_model import (
    ForwardTrace,
    LstmState,
    QNetGrads,
    QNetParams,
    backward_episode,
    clip_global_norm,
    forward_episode,
    init_params,
    lstm_step,
)
from metrics import MetricsRecord, OutcomeCounts, instance_metrics
from observability import emit_event
from optimizer import AdamState, adam_step, init_adam
from tensor_core import DimensionError, Matrix, Rng, softmax

MetricsSink = Callable[[MetricsRecord], None]
GRADCHECK_ENTRY_FLOOR = 1e-4


@dataclass
class Trajectory:
    """
    One rolled-out episode. ``correct`` is only meaningful where ``requests``
    is False; it is stored as False on request steps.
    """

    observations: Matrix  # (T, D)
    actions: np.ndarray  # (T,)
    rewards: np.ndarray  # (T,)
    q: Matrix  # (T, A)
    requests: np.ndarray  # (T,) bool
    correct: np.ndarray  # (T,) bool
    instance_index: np.ndarray  # (T,)
    terminal: bool = True

    @property
    def total_reward(self) -> float:
        return float(self.rewards.sum())


@dataclass
class RolloutBatch:
    trajectories: list[Trajectory]
    trace: ForwardTrace  # batched: arrays carry a leading episode axis

    def __len__(self) -> int:
        return len(self.trajectories)

    def __iter__(self) -> Iterator[tuple[Trajectory, ForwardTrace]]:
        for i, traj in enumerate(self.trajectories):
            yield traj, self.trace.episode(i)

    @property
    def actions(self) -> np.ndarray:
        return np.stack([t.actions for t in self.trajectories], axis=1)

    @property
    def rewards(self) -> np.ndarray:
        return np.stack([t.rewards for t in self.trajectories], axis=1)


def select_action(q: Matrix, rng: Rng, epsilon: float, true_slot: Optional[int] = None) -> Action:
    """
    Greedy on ``q`` (ties to the lowest index) with probability 1-epsilon.
    Otherwise explore: correct slot, a random incorrect slot, or request,
    each with probability 1/3 (1/2 each when there is no incorrect slot).
    """
    classes = len(q) - 1
    if epsilon > 0 and rng.uniform(0.0, 1.0) < epsilon:
        if true_slot is None:
            raise ValueError("exploration needs the true slot; evaluation must run with epsilon=0")
        wrong = [s for s in range(classes) if s != true_slot]
        arms = ["correct", "incorrect", "request"] if wrong else ["correct", "request"]
        arm = arms[rng.choice(len(arms))]
        if arm == "correct":
            return Action(true_slot, classes)
        if arm == "incorrect":
            return Action(wrong[rng.choice(len(wrong))], classes)
        return Action(classes, classes)
    return Action(int(np.argmax(q)), classes)


def _rollout_chunk(params: QNetParams, envs: Sequence[EpisodeEnv], rng: Rng, epsilon: float) -> RolloutBatch:
    steps = envs[0].steps
    if any(env.steps != steps for env in envs):
        raise ProtocolError("all episodes in a batch must have the same number of steps")
    n = len(envs)

    obs = np.stack([env.reset().vector() for env in envs])
    state = LstmState.zeros(params.hidden_size, batch=n)
    trace = ForwardTrace()
    actions = np.zeros((steps, n), dtype=np.int64)
    rewards = np.zeros((steps, n))
    requests = np.zeros((steps, n), dtype=bool)
    correct = np.zeros((steps, n), dtype=bool)

    for t in range(steps):
        state, q, record = lstm_step(params, state, obs)
        trace.records.append(record)
        next_obs = np.zeros_like(obs)
        for i, env in enumerate(envs):
            # The label oracle is only opened while exploring.
            action = select_action(q[i], rng, epsilon, env.true_slot if epsilon > 0 else None)
            result = env.step(action)
            actions[t, i] = action.index
            rewards[t, i] = result.reward
            requests[t, i] = result.was_request
            correct[t, i] = bool(result.was_correct)
            if result.next_observation is not None:
                next_obs[i] = result.next_observation.vector()
        obs = next_obs

    q_all = trace.q
    obs_all = np.stack([r.obs for r in trace.records])
    trajectories = [
        Trajectory(
            observations=obs_all[:, i],
            actions=actions[:, i],
            rewards=rewards[:, i],
            q=q_all[:, i],
            requests=requests[:, i],
            correct=correct[:, i],
            instance_index=instance_index(env.episode),
        )
        for i, env in enumerate(envs)
    ]
    return RolloutBatch(trajectories=trajectories, trace=trace)


def rollout_batch(
    params: QNetParams, envs: Sequence[EpisodeEnv], rng: Rng, epsilon: float, workers: int = 1
) -> RolloutBatch:
    """
    Roll every environment to its terminal step. With ``workers > 1`` the batch
    is split into chunks, each driven by its own child generator on a thread pool;
    results are then reproducible in distribution only.
    """
    if not envs:
        raise ValueError("rollout_batch needs at least one environment")
    if workers <= 1 or len(envs) < 2:
        return _rollout_chunk(params, envs, rng, epsilon)

    bounds = np.array_split(np.arange(len(envs)), min(workers, len(envs)))
    chunks = [[envs[int(i)] for i in idx] for idx in bounds]
    rngs = rng.spawn(len(chunks))
    with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
        parts = list(pool.map(lambda job: _rollout_chunk(params, job[0], job[1], epsilon), zip(chunks, rngs)))
    return RolloutBatch(
        trajectories=[t for part in parts for t in part.trajectories],
        trace=ForwardTrace.concat([part.trace for part in parts]),
    )


def _bootstrap_targets(rewards: np.ndarray, q: Matrix, gamma: float) -> np.ndarray:
    # No target network: the bootstrap uses the same recorded q-vectors. Terminal bootstrap is 0.
    targets = np.array(rewards, dtype=np.float64, copy=True)
    targets[:-1] += gamma * q[1:].max(axis=-1)
    return targets


def td_targets(trajectory: Trajectory, gamma: float) -> np.ndarray:
    """r_t + gamma * max_a q_{t+1}[a] for t < T, r_T at the last step. Constants for differentiation."""
    return _bootstrap_targets(trajectory.rewards, trajectory.q, gamma)


def bellman_dq(q: Matrix, actions: np.ndarray, targets: np.ndarray) -> tuple[float, Matrix]:
    """Mean squared Bellman error over all (step[, episode]) entries and its gradient w.r.t. q."""
    if q.shape[:-1] != actions.shape or actions.shape != targets.shape:
        raise DimensionError(f"q {q.shape}, actions {actions.shape}, targets {targets.shape} do not align")
    idx = actions[..., None]
    chosen = np.take_along_axis(q, idx, axis=-1)[..., 0]
    diff = chosen - targets
    loss = float(np.mean(diff**2))
    dq = np.zeros_like(q)
    np.put_along_axis(dq, idx, (2.0 * diff / diff.size)[..., None], axis=-1)
    return loss, dq


def bellman_loss_and_grads(params: QNetParams, batch: RolloutBatch, gamma: float = 0.5) -> tuple[float, QNetGrads]:
    q = batch.trace.q  # (T, N, A)
    targets = _bootstrap_targets(batch.rewards, q, gamma)
    loss, dq = bellman_dq(q, batch.actions, targets)
    return loss, backward_episode(params, batch.trace, dq)


def frozen_bellman_loss(params: QNetParams, observations: Matrix, actions: np.ndarray, targets: np.ndarray) -> float:
    return bellman_dq(forward_episode(params, observations).q, actions, targets)[0]


def frozen_bellman_loss_and_grads(
    params: QNetParams, observations: Matrix, actions: np.ndarray, targets: np.ndarray
) -> tuple[float, QNetGrads]:
    """Bellman loss with actions, observations and targets held fixed."""
    trace = forward_episode(params, observations)
    loss, dq = bellman_dq(trace.q, actions, targets)
    return loss, backward_episode(params, trace, dq)


@dataclass
class TrainResult:
    params: QNetParams
    adam: AdamState
    losses: list[float] = field(default_factory=list)
    train_records: list[MetricsRecord] = field(default_factory=list)
    eval_records: list[MetricsRecord] = field(default_factory=list)
    eval_counts: OutcomeCounts = field(default_factory=OutcomeCounts)


def _check_shapes(params: QNetParams, config: TrainConfig, actions: int) -> None:
    expected = (config.hidden, config.episode.observation_size, actions)
    actual = (params.hidden_size, params.input_size, params.action_count)
    if expected != actual:
        raise DimensionError(f"params have (H, D, A)={actual}, config needs {expected}")


def evaluate(
    params: QNetParams,
    view: DatasetView,
    config: TrainConfig,
    batches: Optional[int] = None,
    sink: Optional[MetricsSink] = None,
    start_index: int = 0,
) -> tuple[OutcomeCounts, list[MetricsRecord]]:
    """Greedy batches on held-out classes with frozen parameters."""
    root = Rng(config.seed)
    spec = config.episode
    counts = OutcomeCounts()
    records = []
    for b in range(config.eval_batches if batches is None else batches):
        rng = root.child("eval", b)
        envs = [EpisodeEnv(sample_episode(rng, spec, view), spec.rewards) for _ in range(config.batch_size)]
        batch = rollout_batch(params, envs, rng, epsilon=0.0, workers=config.workers)
        counts.add(batch.trajectories)
        record = instance_metrics(batch.trajectories, start_index + b, "test")
        records.append(record)
        if sink is not None:
            sink(record)
    emit_event("eval_finished", batches=len(records), **{k: v for k, v in counts.to_dict().items() if k != "by_instance"})
    return counts, records


def train(
    config: TrainConfig,
    train_view: DatasetView,
    test_view: DatasetView,
    sink: Optional[MetricsSink] = None,
    params: Optional[QNetParams] = None,
    adam: Optional[AdamState] = None,
) -> TrainResult:
    """
    Q-learning over ``config.total_batches`` batches, then greedy evaluation on
    the test view. Passing ``params`` and ``adam`` resumes at batch ``adam.t``;
    every batch draws from its own (seed, batch) generator so a resumed run
    continues the same stream.
    """
    config_guardrail(config)
    spec = config.episode
    root = Rng(config.seed)
    if params is None:
        params = init_params(root.child("init"), config.hidden, spec.observation_size, spec.action_count, config.init_scale)
    _check_shapes(params, config, spec.action_count)
    if adam is None:
        adam = init_adam(params, lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.adam_eps)

    result = TrainResult(params=params, adam=adam)
    emit_event("train_started", start_batch=adam.t, total_batches=config.total_batches, params=params.count())
    for b in range(adam.t, config.total_batches):
        rng = root.child("train", b)
        envs = [EpisodeEnv(sample_episode(rng, spec, train_view), spec.rewards) for _ in range(config.batch_size)]
        batch = rollout_batch(params, envs, rng, config.epsilon, workers=config.workers)
        loss, grads = bellman_loss_and_grads(params, batch, config.gamma)
        loss_guardrail(loss, b, params)
        grad_norm = clip_global_norm(grads, config.clip)
        adam_step(params, grads, adam)

        record = instance_metrics(batch.trajectories, b, "train", loss)
        result.losses.append(loss)
        result.train_records.append(record)
        if sink is not None:
            sink(record)
        if (b + 1) % config.log_every == 0:
            print(f"[Träning]: batch {b + 1}/{config.total_batches} loss={loss:.5f} belöning={record.mean_reward:.3f}")
            emit_event(
                "train_progress",
                batch=b + 1,
                loss=loss,
                grad_norm=grad_norm,
                mean_reward=record.mean_reward,
                request_rate=record.request_rate,
                accuracy=record.accuracy,
            )

    loss_guardrail(result.losses[-1] if result.losses else 0.0, config.total_batches, params)
    result.eval_counts, result.eval_records = evaluate(params, test_view, config, sink=sink, start_index=config.total_batches)
    emit_event("train_finished", batches=config.total_batches, eval_accuracy=result.eval_counts.accuracy)
    return result


@dataclass
class SupervisedResult:
    params: QNetParams
    counts: OutcomeCounts
    losses: list[float] = field(default_factory=list)
    max_softmax_error: float = 0.0

    @property
    def accuracy(self) -> Optional[float]:
        return self.counts.accuracy

    @property
    def accuracy_after_first(self) -> Optional[float]:
        return self.counts.accuracy_from_instance(2)


def _supervised_batch(rng: Rng, config: TrainConfig, view: DatasetView) -> tuple[list, Matrix, np.ndarray]:
    spec = config.episode
    episodes = [sample_episode(rng, spec, view) for _ in range(config.batch_size)]
    obs = np.stack([supervised_observations(e) for e in episodes], axis=1)  # (T, N, D)
    labels = np.stack([e.label_slots for e in episodes], axis=1)  # (T, N)
    return episodes, obs, labels


def _supervised_trajectories(config: TrainConfig, episodes: list, obs: Matrix, logits: Matrix, labels: np.ndarray) -> list[Trajectory]:
    rewards = config.rewards
    preds = logits.argmax(axis=-1)
    hits = preds == labels
    return [
        Trajectory(
            observations=obs[:, i],
            actions=preds[:, i],
            rewards=np.where(hits[:, i], rewards.r_cor, rewards.r_inc),
            q=logits[:, i],
            requests=np.zeros(len(e.label_slots), dtype=bool),
            correct=hits[:, i],
            instance_index=instance_index(e),
        )
        for i, e in enumerate(episodes)
    ]


def train_supervised(
    config: TrainConfig,
    train_view: DatasetView,
    test_view: DatasetView,
    sink: Optional[MetricsSink] = None,
) -> SupervisedResult:
    """
    Cross-entropy baseline on the same LSTM: c softmax outputs, no request
    action, and the true label of step t always arrives with step t+1.
    """
    config_guardrail(config)
    spec = config.episode
    c = spec.classes_per_episode
    root = Rng(config.seed)
    params = init_params(root.child("init"), config.hidden, spec.observation_size, c, config.init_scale)
    adam = init_adam(params, lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.adam_eps)
    losses: list[float] = []
    max_err = 0.0

    for b in range(config.total_batches):
        episodes, obs, labels = _supervised_batch(root.child("supervised", b), config, train_view)
        trace = forward_episode(params, obs)
        logits = trace.q
        probs = softmax(logits)
        max_err = max(max_err, float(np.max(np.abs(probs.sum(axis=-1) - 1.0))))
        picked = np.take_along_axis(probs, labels[..., None], axis=-1)[..., 0]
        loss = float(-np.mean(np.log(np.maximum(picked, 1e-300))))
        loss_guardrail(loss, b, params)

        dlogits = probs.copy()
        np.put_along_axis(dlogits, labels[..., None], (picked - 1.0)[..., None], axis=-1)
        dlogits /= labels.size
        grads = backward_episode(params, trace, dlogits)
        clip_global_norm(grads, config.clip)
        adam_step(params, grads, adam)
        losses.append(loss)

        if sink is not None or (b + 1) % config.log_every == 0:
            record = instance_metrics(_supervised_trajectories(config, episodes, obs, logits, labels), b, "train", loss)
            if sink is not None:
                sink(record)
            if (b + 1) % config.log_every == 0:
                print(f"[Övervakad]: batch {b + 1}/{config.total_batches} loss={loss:.5f}")
                emit_event("train_progress", mode="supervised", batch=b + 1, loss=loss, accuracy=record.accuracy)

    counts = OutcomeCounts()
    for b in range(config.eval_batches):
        episodes, obs, labels = _supervised_batch(root.child("eval", b), config, test_view)
        logits = forward_episode(params, obs).q
        max_err = max(max_err, float(np.max(np.abs(softmax(logits).sum(axis=-1) - 1.0))))
        trajectories = _supervised_trajectories(config, episodes, obs, logits, labels)
        counts.add(trajectories)
        if sink is not None:
            sink(instance_metrics(trajectories, config.total_batches + b, "test"))

    result = SupervisedResult(params=params, counts=counts, losses=losses, max_softmax_error=max_err)
    emit_event(
        "supervised_finished",
        accuracy=result.accuracy,
        accuracy_after_first=result.accuracy_after_first,
        max_softmax_error=max_err,
    )
    return result


def gradient_check(
    rng: Rng, hidden: int, input_size: int = 10, actions: int = 4, steps: int = 5, h: float = 1e-5
) -> dict[str, float]:
    """
    Compare analytic gradients of the frozen Bellman loss with central
    differences. Returns the relative error ||a - n|| / (||a|| + ||n||) per block,
    their ``max``, and ``max_entrywise``: the largest |a - n| / max(|a| + |n|, floor)
    over single entries, which catches one bad entry inside a large block.
    """
    params = init_params(rng, hidden, input_size, actions, scale=0.5)
    params.b_gates += rng.uniform_array(-0.5, 0.5, params.b_gates.shape)
    params.b_head += rng.uniform_array(-0.5, 0.5, params.b_head.shape)
    observations = rng.normal(1.0, (steps, input_size))
    chosen = rng.integers(0, actions, size=steps)
    targets = rng.normal(1.0, (steps,))

    _, analytic = frozen_bellman_loss_and_grads(params, observations, chosen, targets)
    errors: dict[str, float] = {}
    entrywise = 0.0
    for name, theta in params.blocks():
        numeric = np.zeros_like(theta)
        flat, out = theta.reshape(-1), numeric.reshape(-1)
        for j in range(flat.size):
            saved = flat[j]
            flat[j] = saved + h
            up = frozen_bellman_loss(params, observations, chosen, targets)
            flat[j] = saved - h
            down = frozen_bellman_loss(params, observations, chosen, targets)
            flat[j] = saved
            out[j] = (up - down) / (2.0 * h)
        a = getattr(analytic, name)
        denom = max(float(np.linalg.norm(a) + np.linalg.norm(numeric)), 1e-12)
        errors[name] = float(np.linalg.norm(a - numeric)) / denom
        entry_denom = np.maximum(np.abs(a) + np.abs(numeric), GRADCHECK_ENTRY_FLOOR)
        entrywise = max(entrywise, float(np.max(np.abs(a - numeric) / entry_denom)))
    errors["max"] = max(errors.values())
    errors["max_entrywise"] = entrywise
    return errors
