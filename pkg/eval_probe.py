from __future__ import annotations

# eval_probe.py
import csv
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from config import RewardScheme, TrainConfig
from dataset_ingest import DatasetView
from episode_env import EpisodeEnv, make_probe_episode
from lstm_q_model import QNetParams
from observability import emit_event
from tensor_core import Rng
from trainer import rollout_batch, train, train_supervised

PROBE_HEADER = ["prefix_len", "step", "request_pct", "n"]
SWEEP_HEADER = ["model", "r_inc", "batch_size", "accuracy_pct", "prediction_accuracy_pct", "request_pct", "status"]


@dataclass
class ProbeResult:
    prefix_len: int
    request_pct: list[float]  # one entry per step, prefix_len + 1 in total
    n: int

    @property
    def switch_step(self) -> int:
        """1-based step where the second class appears."""
        return self.prefix_len + 1


def run_probe(
    params: QNetParams,
    view: DatasetView,
    prefix_len: int,
    n_episodes: int = 1000,
    rng: Optional[Rng] = None,
    rewards: Optional[RewardScheme] = None,
    chunk: int = 100,
) -> ProbeResult:
    """Greedy policy on class-switch streams; percentage of episodes requesting at each step."""
    if n_episodes < 1:
        raise ValueError(f"n_episodes must be >= 1, got {n_episodes}")
    rng = rng or Rng(0)
    rewards = rewards or RewardScheme()
    classes = params.action_count - 1
    requests = np.zeros(prefix_len + 1)
    done = 0
    while done < n_episodes:
        size = min(chunk, n_episodes - done)
        envs = [EpisodeEnv(make_probe_episode(rng, view, prefix_len, classes), rewards) for _ in range(size)]
        batch = rollout_batch(params, envs, rng, epsilon=0.0)
        requests += np.sum([t.requests for t in batch.trajectories], axis=0)
        done += size
    result = ProbeResult(prefix_len=prefix_len, request_pct=(100.0 * requests / n_episodes).tolist(), n=n_episodes)
    emit_event("probe_finished", prefix_len=prefix_len, n=n_episodes, request_pct=result.request_pct)
    return result


def write_probe_csv(result: ProbeResult, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(PROBE_HEADER)
        for step, pct in enumerate(result.request_pct, start=1):
            writer.writerow([result.prefix_len, step, repr(float(pct)), result.n])


@dataclass
class SweepRow:
    model: str
    r_inc: Optional[float]
    batch_size: int
    accuracy: Optional[float] = None
    prediction_accuracy: Optional[float] = None
    request_pct: Optional[float] = None
    error: Optional[str] = None

    def csv_row(self) -> list[str]:
        def pct(v: Optional[float]) -> str:
            return "" if v is None else repr(100.0 * v)

        return [
            self.model,
            "" if self.r_inc is None else repr(float(self.r_inc)),
            str(self.batch_size),
            pct(self.accuracy),
            pct(self.prediction_accuracy),
            "" if self.request_pct is None else repr(float(self.request_pct)),
            "ok" if self.error is None else f"failed: {self.error}",
        ]


def sweep_seed(base_seed: int, r_inc: float) -> int:
    return (base_seed + zlib.crc32(repr(float(r_inc)).encode("utf-8"))) % (2**32)


def sweep_config(base: TrainConfig, r_inc: float) -> TrainConfig:
    batch = base.batch_size * 2 if r_inc <= -10 else base.batch_size
    return base.with_overrides(r_inc=r_inc, batch_size=batch, seed=sweep_seed(base.seed, r_inc))


def run_sweep(
    base_config: TrainConfig,
    r_inc_values: Sequence[float],
    train_view: DatasetView,
    test_view: DatasetView,
    supervised: bool = False,
) -> list[SweepRow]:
    """One independent model per r_inc, evaluated on test classes. A failed run becomes a row, not an abort."""
    rows: list[SweepRow] = []
    for r_inc in r_inc_values:
        config = sweep_config(base_config, r_inc)
        row = SweepRow(model="RL", r_inc=r_inc, batch_size=config.batch_size)
        try:
            result = train(config, train_view, test_view)
            counts = result.eval_counts
            row.accuracy = counts.accuracy
            row.prediction_accuracy = counts.prediction_accuracy
            row.request_pct = None if counts.request_rate is None else 100.0 * counts.request_rate
            emit_event("sweep_row", r_inc=r_inc, accuracy=row.accuracy, prediction_accuracy=row.prediction_accuracy, request_pct=row.request_pct)
        except Exception as e:
            row.error = str(e).splitlines()[0] if str(e) else type(e).__name__
            emit_event("sweep_failed", r_inc=r_inc, error=row.error)
        rows.append(row)

    if supervised:
        row = SweepRow(model="Supervised", r_inc=None, batch_size=base_config.batch_size)
        try:
            result = train_supervised(base_config, train_view, test_view)
            row.accuracy = result.accuracy
            row.prediction_accuracy = result.accuracy
            row.request_pct = 100.0
            emit_event("sweep_row", model="Supervised", accuracy=row.accuracy)
        except Exception as e:
            row.error = str(e).splitlines()[0] if str(e) else type(e).__name__
            emit_event("sweep_failed", model="Supervised", error=row.error)
        rows.append(row)
    return rows


def write_sweep_csv(rows: Sequence[SweepRow], path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SWEEP_HEADER)
        for row in rows:
            writer.writerow(row.csv_row())
