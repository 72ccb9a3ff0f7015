from __future__ import annotations

# episode_env.py
from collections import Counter
from dataclasses import dataclass
from typing import Optional

import numpy as np

from config import EpisodeSpec, RewardScheme
from dataset_ingest import DatasetView, flatten, pooled_examples, rotate90
from tensor_core import Matrix, Rng


class SamplingError(ValueError):
    """Raised when the dataset view cannot supply the requested episode."""


class ProtocolError(RuntimeError):
    """Raised when the environment is driven out of order."""


@dataclass(frozen=True)
class Episode:
    """
    One stream of images. ``label_slots[t]`` is the one-hot position of the
    true class at step t; ``examples[t]`` is the (class_id, example_index) drawn.
    """

    images: Matrix  # (steps, image_dim)
    label_slots: np.ndarray  # (steps,) int
    class_ids: tuple[int, ...]  # per step
    rotations: dict[int, int]  # class_id -> quarter turns
    examples: tuple[tuple[int, int], ...]
    classes_per_episode: int

    @property
    def steps(self) -> int:
        return len(self.label_slots)

    @property
    def image_dim(self) -> int:
        return self.images.shape[1]


@dataclass(frozen=True)
class Observation:
    image: Matrix
    label_channel: Matrix  # one-hot y_{t-1} after a request, zero vector otherwise

    def vector(self) -> Matrix:
        return np.concatenate([self.image, self.label_channel])


@dataclass(frozen=True)
class Action:
    """Index in [0, c]; indices below c predict that slot, index c requests the label."""

    index: int
    classes: int

    def __post_init__(self) -> None:
        if not 0 <= self.index <= self.classes:
            raise ValueError(f"action index {self.index} outside [0, {self.classes}]")

    @property
    def is_request(self) -> bool:
        return self.index == self.classes

    def one_hot(self) -> Matrix:
        vec = np.zeros(self.classes + 1)
        vec[self.index] = 1.0
        return vec


@dataclass(frozen=True)
class StepResult:
    reward: float
    next_observation: Optional[Observation]  # None marks the terminal step
    was_request: bool
    was_correct: Optional[bool]  # None for requests

    @property
    def terminal(self) -> bool:
        return self.next_observation is None


def _one_hot(slot: int, classes: int) -> Matrix:
    vec = np.zeros(classes)
    vec[slot] = 1.0
    return vec


def _build_episode(
    rng: Rng, view: DatasetView, chosen: list[int], draws: list[tuple[int, int]], classes: int
) -> Episode:
    # One rotation per class, and a uniform class -> slot bijection.
    rotations = {cid: rng.choice(4) for cid in chosen}
    slot_order = rng.shuffle(list(range(classes)))
    slot_of = dict(zip(chosen, slot_order))

    images = np.stack([flatten(rotate90(view.image(cid, j), rotations[cid])) for cid, j in draws])
    return Episode(
        images=images,
        label_slots=np.array([slot_of[cid] for cid, _ in draws], dtype=np.int64),
        class_ids=tuple(cid for cid, _ in draws),
        rotations=rotations,
        examples=tuple(draws),
        classes_per_episode=classes,
    )


def sample_episode(rng: Rng, spec: EpisodeSpec, view: DatasetView) -> Episode:
    """
    c classes without replacement, then ``spec.steps`` examples drawn uniformly
    from the pooled examples of those classes without reuse, so per-class counts
    may differ. Draws that leave a chosen class out are rejected, so every
    episode with steps >= c shows exactly c distinct classes.
    """
    ids = view.class_ids
    c = spec.classes_per_episode
    if len(ids) < c:
        raise SamplingError(f"need {c} classes, dataset view has {len(ids)}")
    if view.image_side**2 != spec.image_dim:
        raise SamplingError(f"image_dim {spec.image_dim} does not match {view.image_side}x{view.image_side} images")

    chosen = [ids[int(i)] for i in rng.sample(len(ids), c)]
    empty = [cid for cid in chosen if view.example_count(cid) < 1]
    if empty:
        raise SamplingError(f"classes {empty} have no examples")
    pool = pooled_examples(view, chosen)
    if len(pool) < spec.steps:
        raise SamplingError(f"classes {chosen} pool only {len(pool)} examples, episode needs {spec.steps}")
    # Redraw until min(c, steps) distinct classes appear.
    while True:
        draws = [pool[int(i)] for i in rng.sample(len(pool), spec.steps)]
        if len({cid for cid, _ in draws}) == min(c, spec.steps):
            return _build_episode(rng, view, chosen, draws, c)


def make_probe_episode(rng: Rng, view: DatasetView, prefix_len: int, classes: int = 3) -> Episode:
    """``prefix_len`` examples of one class followed by a single example of a second class."""
    ids = view.class_ids
    if len(ids) < 2:
        raise SamplingError(f"probe needs 2 classes, dataset view has {len(ids)}")
    if prefix_len < 1:
        raise ValueError(f"prefix_len must be >= 1, got {prefix_len}")
    first, second = (ids[int(i)] for i in rng.sample(len(ids), 2))
    if view.example_count(first) < prefix_len:
        raise SamplingError(f"class {first} has {view.example_count(first)} examples, probe needs {prefix_len}")

    prefix = [(first, int(j)) for j in rng.sample(view.example_count(first), prefix_len)]
    switch = (second, rng.choice(view.example_count(second)))
    return _build_episode(rng, view, [first, second], [*prefix, switch], max(classes, 2))


def instance_index(episode: Episode) -> np.ndarray:
    """1-based occurrence number of each step's class within the episode so far."""
    seen: Counter[int] = Counter()
    out = np.empty(episode.steps, dtype=np.int64)
    for t, cid in enumerate(episode.class_ids):
        seen[cid] += 1
        out[t] = seen[cid]
    return out


def supervised_observations(episode: Episode) -> Matrix:
    """Observations where the previous true label is always revealed: (steps, image_dim + c)."""
    c = episode.classes_per_episode
    labels = np.zeros((episode.steps, c))
    labels[np.arange(1, episode.steps), episode.label_slots[:-1]] = 1.0
    return np.concatenate([episode.images, labels], axis=1)


class EpisodeEnv:
    """Single-owner environment over one episode."""

    def __init__(self, episode: Episode, rewards: RewardScheme) -> None:
        self.episode = episode
        self.rewards = rewards
        self._t: int | None = None

    @property
    def steps(self) -> int:
        return self.episode.steps

    @property
    def classes(self) -> int:
        return self.episode.classes_per_episode

    @property
    def terminal(self) -> bool:
        return self._t is not None and self._t >= self.steps

    @property
    def true_slot(self) -> int:
        """Label of the current step. Training-time exploration only."""
        if self._t is None or self.terminal:
            raise ProtocolError("no current step (call reset() first or episode finished)")
        return int(self.episode.label_slots[self._t])

    def _observation(self, t: int, label_channel: Matrix) -> Observation:
        return Observation(image=self.episode.images[t], label_channel=label_channel)

    def reset(self) -> Observation:
        self._t = 0
        return self._observation(0, np.zeros(self.classes))

    def step(self, action: Action | int) -> StepResult:
        if self._t is None:
            raise ProtocolError("step() called before reset()")
        if self.terminal:
            raise ProtocolError("step() called after the episode ended")
        if not isinstance(action, Action):
            action = Action(int(action), self.classes)
        elif action.classes != self.classes:
            raise ValueError(f"action built for {action.classes} classes, episode has {self.classes}")

        slot = int(self.episode.label_slots[self._t])
        if action.is_request:
            reward, correct = self.rewards.r_req, None
            channel = _one_hot(slot, self.classes)
        else:
            correct = action.index == slot
            reward = self.rewards.r_cor if correct else self.rewards.r_inc
            channel = np.zeros(self.classes)

        self._t += 1
        # The label of a request on the last step is never shown; there is no next observation.
        next_obs = None if self.terminal else self._observation(self._t, channel)
        return StepResult(reward=reward, next_observation=next_obs, was_request=action.is_request, was_correct=correct)
