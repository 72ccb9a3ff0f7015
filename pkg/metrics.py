from __future__ import annotations

# metrics.py
import csv
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any, Iterable, Optional

if TYPE_CHECKING:
    from trainer import Trajectory

INSTANCE_KS = (1, 2, 5, 10)
METRICS_HEADER = ["batch", "split", "k", "request_rate", "accuracy", "mean_reward", "mean_requests"]


def _ratio(num: int, den: int) -> Optional[float]:
    return num / den if den else None


@dataclass
class OutcomeCounts:
    """
    Running totals over trajectories. Requests count as incorrect for
    ``accuracy``; ``prediction_accuracy`` only looks at steps where a
    prediction was made.
    """

    episodes: int = 0
    steps: int = 0
    requests: int = 0
    correct: int = 0
    incorrect: int = 0
    reward_total: float = 0.0
    by_instance_steps: Counter = field(default_factory=Counter)
    by_instance_requests: Counter = field(default_factory=Counter)
    by_instance_correct: Counter = field(default_factory=Counter)

    def add(self, trajectories: Iterable["Trajectory"]) -> "OutcomeCounts":
        for traj in trajectories:
            self.episodes += 1
            self.steps += len(traj.actions)
            n_req = int(traj.requests.sum())
            n_cor = int((traj.correct & ~traj.requests).sum())
            self.requests += n_req
            self.correct += n_cor
            self.incorrect += len(traj.actions) - n_req - n_cor
            self.reward_total += float(traj.rewards.sum())
            for k, req, cor in zip(traj.instance_index.tolist(), traj.requests.tolist(), traj.correct.tolist()):
                self.by_instance_steps[k] += 1
                self.by_instance_requests[k] += int(req)
                self.by_instance_correct[k] += int(cor and not req)
        return self

    @property
    def accuracy(self) -> Optional[float]:
        return _ratio(self.correct, self.steps)

    @property
    def prediction_accuracy(self) -> Optional[float]:
        return _ratio(self.correct, self.correct + self.incorrect)

    @property
    def request_rate(self) -> Optional[float]:
        return _ratio(self.requests, self.steps)

    @property
    def mean_reward(self) -> Optional[float]:
        return self.reward_total / self.episodes if self.episodes else None

    @property
    def mean_requests(self) -> Optional[float]:
        return _ratio(self.requests, self.episodes)

    def instance_request_rate(self, k: int) -> Optional[float]:
        return _ratio(self.by_instance_requests[k], self.by_instance_steps[k])

    def instance_accuracy(self, k: int) -> Optional[float]:
        return _ratio(self.by_instance_correct[k], self.by_instance_steps[k])

    def accuracy_from_instance(self, k_min: int) -> Optional[float]:
        steps = sum(n for k, n in self.by_instance_steps.items() if k >= k_min)
        correct = sum(n for k, n in self.by_instance_correct.items() if k >= k_min)
        return _ratio(correct, steps)

    def to_dict(self) -> dict[str, Any]:
        return {
            "episodes": self.episodes,
            "steps": self.steps,
            "requests": self.requests,
            "correct": self.correct,
            "incorrect": self.incorrect,
            "accuracy": self.accuracy,
            "prediction_accuracy": self.prediction_accuracy,
            "request_pct": None if self.request_rate is None else 100.0 * self.request_rate,
            "mean_reward": self.mean_reward,
            "mean_requests": self.mean_requests,
            "by_instance": {
                str(k): {"request_rate": self.instance_request_rate(k), "accuracy": self.instance_accuracy(k)}
                for k in INSTANCE_KS
            },
        }


@dataclass
class MetricsRecord:
    batch_index: int
    split: str
    request_rate: dict[int, Optional[float]]
    accuracy: dict[int, Optional[float]]
    mean_reward: float
    mean_requests: float
    steps: int
    requests: int
    correct: int
    incorrect: int
    loss: Optional[float] = None

    def csv_rows(self) -> list[list[str]]:
        return [
            [
                str(self.batch_index),
                self.split,
                str(k),
                _fmt(self.request_rate[k]),
                _fmt(self.accuracy[k]),
                _fmt(self.mean_reward),
                _fmt(self.mean_requests),
            ]
            for k in INSTANCE_KS
        ]


def _fmt(value: Optional[float]) -> str:
    return "" if value is None else repr(float(value))


def instance_metrics(
    trajectories: Iterable["Trajectory"], batch_index: int = 0, split: str = "train", loss: Optional[float] = None
) -> MetricsRecord:
    """Request rate and accuracy at the 1st, 2nd, 5th and 10th instance of a class; absent k stay None."""
    counts = OutcomeCounts().add(trajectories)
    if counts.episodes == 0:
        raise ValueError("instance_metrics needs at least one trajectory")
    return MetricsRecord(
        batch_index=batch_index,
        split=split,
        request_rate={k: counts.instance_request_rate(k) for k in INSTANCE_KS},
        accuracy={k: counts.instance_accuracy(k) for k in INSTANCE_KS},
        mean_reward=counts.mean_reward,
        mean_requests=counts.mean_requests,
        steps=counts.steps,
        requests=counts.requests,
        correct=counts.correct,
        incorrect=counts.incorrect,
        loss=loss,
    )


class CsvMetricsSink:
    """
    Writes ``MetricsRecord`` rows to a CSV file; usable as a context manager.

    ``resume_at=b`` continues a resumed run: an existing file is cut back to its
    ``split=train`` rows with batch < b before new rows follow, so evaluation
    rows of the earlier run never end up inside the training curve.
    """

    def __init__(self, path: Path, resume_at: Optional[int] = None) -> None:
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        kept: list[list[str]] = []
        if resume_at is not None and self.path.exists() and self.path.stat().st_size > 0:
            kept = [
                [row[name] for name in METRICS_HEADER]
                for row in read_metrics_csv(self.path)
                if row["split"] == "train" and int(row["batch"]) < resume_at
            ]
        self._fh = self.path.open("w", encoding="utf-8", newline="")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        self._writer.writerow(METRICS_HEADER)
        self._writer.writerows(kept)

    def __call__(self, record: MetricsRecord) -> None:
        self._writer.writerows(record.csv_rows())

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "CsvMetricsSink":
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()


def read_metrics_csv(path: Path) -> list[dict[str, str]]:
    with Path(path).open("r", encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))
