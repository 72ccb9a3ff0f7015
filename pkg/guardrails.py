# guardrails.py
from __future__ import annotations

import math
from typing import Any

import numpy as np

from config import RewardScheme, TrainConfig
from lstm_q_model import QNetParams
from observability import emit_event


class NumericalAbort(RuntimeError):
    """Raised when training produces a non-finite loss or parameters."""

    def __init__(
        self, message: str, batch_index: int, loss: float, snapshot: dict[str, Any], params: QNetParams | None = None
    ) -> None:
        super().__init__(message)
        self.batch_index = batch_index
        self.loss = loss
        self.snapshot = snapshot
        self.params = params


def reward_warnings(rewards: RewardScheme) -> list[str]:
    warnings = []
    if not rewards.r_cor > rewards.r_req:
        warnings.append(f"r_cor ({rewards.r_cor}) <= r_req ({rewards.r_req}): requesting pays at least as well as predicting")
    if not rewards.r_req > rewards.r_inc:
        warnings.append(f"r_req ({rewards.r_req}) <= r_inc ({rewards.r_inc}): guessing is never worse than asking")
    return warnings


def config_guardrail(config: TrainConfig) -> list[str]:
    """Warn, never reject, about configurations that are legal but odd."""
    warnings = reward_warnings(config.rewards)
    if config.episode.classes_per_episode < 2:
        warnings.append("classes_per_episode < 2: every prediction is trivially correct")
    if config.episode.steps < config.episode.classes_per_episode:
        warnings.append("steps < classes_per_episode: some classes never appear")
    for w in warnings:
        print(f"Guardrail-varning: {w}")
        emit_event("guardrail_warning", warning=w)
    return warnings


def params_snapshot(params: QNetParams) -> dict[str, Any]:
    return {
        "norms": params.norms(),
        "finite": {name: bool(np.all(np.isfinite(arr))) for name, arr in params.blocks()},
    }


def loss_guardrail(loss: float, batch_index: int, params: QNetParams) -> None:
    if math.isfinite(loss) and params.is_finite():
        return
    snapshot = params_snapshot(params)
    emit_event("numerical_abort", batch=batch_index, loss=repr(loss), **snapshot)
    raise NumericalAbort(
        f"Non-finite loss or parameters at batch {batch_index} (loss={loss!r}).",
        batch_index=batch_index,
        loss=loss,
        snapshot=snapshot,
        params=params.copy(),
    )
