from __future__ import annotations

# config.py
import json
import os
from pathlib import Path
from typing import Any, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

__version__ = "0.1.0"

DEFAULT_DATA_DIR = "data"


class RewardScheme(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    r_req: float = Field(default=-0.05, description="Reward for requesting the label.")
    r_cor: float = Field(default=1.0, description="Reward for a correct prediction.")
    r_inc: float = Field(default=-1.0, description="Reward for an incorrect prediction.")


class EpisodeSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    steps: int = Field(default=30, ge=1, description="Images per episode.")
    # c=1 is accepted as a degenerate configuration; guardrails warn about it.
    classes_per_episode: int = Field(default=3, ge=1, description="Classes per episode (c).")
    rewards: RewardScheme = Field(default_factory=RewardScheme)
    image_dim: int = Field(default=784, ge=1, description="Flattened image length.")

    @property
    def observation_size(self) -> int:
        return self.image_dim + self.classes_per_episode

    @property
    def action_count(self) -> int:
        return self.classes_per_episode + 1


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    batch_size: int = Field(default=50, ge=1)
    episode: EpisodeSpec = Field(default_factory=EpisodeSpec)
    gamma: float = Field(default=0.5, ge=0.0, lt=1.0)
    epsilon: float = Field(default=0.05, ge=0.0, le=1.0)
    hidden: int = Field(default=200, ge=1)
    total_batches: int = Field(default=100_000, ge=0)
    eval_batches: int = Field(default=10_000, ge=0)
    seed: int = Field(default=0, ge=0)
    clip: Optional[float] = Field(default=None, gt=0.0, description="Global-norm gradient clip; null disables.")
    init_scale: float = Field(default=0.08, ge=0.0)
    lr: float = Field(default=1e-3, gt=0.0)
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(default=1e-8, gt=0.0)
    workers: int = Field(default=1, ge=1)
    log_every: int = Field(default=100, ge=1)

    @property
    def rewards(self) -> RewardScheme:
        return self.episode.rewards

    def with_overrides(self, **overrides: Any) -> "TrainConfig":
        """Return a validated copy with non-None overrides applied (flag > file > default)."""
        data = self.model_dump()
        for key, value in overrides.items():
            if value is None:
                continue
            if key == "r_inc":
                data["episode"]["rewards"]["r_inc"] = value
            else:
                data[key] = value
        return TrainConfig.model_validate(data)


class ClassSplit(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    seed: int
    train_ids: list[int]
    test_ids: list[int]

    @field_validator("train_ids", "test_ids")
    @classmethod
    def _no_duplicates(cls, ids: list[int]) -> list[int]:
        if len(set(ids)) != len(ids):
            raise ValueError("class id list contains duplicates")
        return ids

    @model_validator(mode="after")
    def _disjoint(self) -> "ClassSplit":
        overlap = set(self.train_ids) & set(self.test_ids)
        if overlap:
            raise ValueError(f"train and test classes overlap: {sorted(overlap)[:10]}")
        return self


def load_config(path: Path | None) -> TrainConfig:
    """
    Load a TrainConfig from JSON. A run manifest is accepted as well;
    its embedded ``config`` object is used.
    """
    if path is None:
        return TrainConfig()
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Config file not found: {path}")
    data = json.loads(path.read_text(encoding="utf-8"))
    if isinstance(data, dict) and "manifest_version" in data and "config" in data:
        data = data["config"]
    return TrainConfig.model_validate(data)


def save_split(split: ClassSplit, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(split.model_dump(), indent=2) + "\n", encoding="utf-8")


def load_split(path: Path) -> ClassSplit:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Split file not found: {path}")
    return ClassSplit.model_validate_json(path.read_text(encoding="utf-8"))


def load_environment() -> Path:
    """Load ``.env`` beside main.py and return the dataset root (METALABEL_DATA_DIR)."""
    dotenv_path = Path(__file__).with_name(".env")
    load_dotenv(dotenv_path=dotenv_path)
    return Path(os.getenv("METALABEL_DATA_DIR", DEFAULT_DATA_DIR).strip() or DEFAULT_DATA_DIR)
