from pydantic import BaseModel, ConfigDict, ValidationError, model_validator
from typing import Any, Dict, Mapping, Optional
from logging import Logger, basicConfig, getLogger, INFO
from pathlib import Path
from sys import path
from math import inf

basicConfig(
    level=INFO, format="%(asctime)s - %(levelname)s - %(funcName)s - %(message)s"
)
logger: Logger = getLogger(__name__)

root_path = Path(__file__).parent.parent.parent
path.append(str(root_path))

from src.model.config import ConfigError, ModelConfig


class TrainConfig(BaseModel):
    """
    Optimization budget and recipe shared by every variant of a comparison.

    Attributes:
        steps (int): Optimizer steps.
        batch_size (int): Windows per step.
        seq_len (int): Tokens per window (targets shifted by one).
        learning_rate (float): Peak learning rate.
        warmup_ratio (float): Fraction of steps spent in linear warmup.
        min_lr_ratio (float): Cosine floor as a fraction of the peak.
        weight_decay (float): Decoupled decay for backbone matrices.
        clip_norm (float): Global gradient-norm threshold; ``inf`` disables clipping.
        eval_interval (int): Steps between evaluation points.
        eval_batches (int | None): Eval windows cap; None evaluates everything.
        checkpoint_interval (int | None): Steps between checkpoints; None saves only at the end.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    steps: int
    batch_size: int = 8
    seq_len: int = 64
    learning_rate: float = 3e-3
    warmup_ratio: float = 0.02
    min_lr_ratio: float = 0.1
    weight_decay: float = 0.1
    clip_norm: float = 1.0
    eval_interval: int = 100
    eval_batches: Optional[int] = None
    checkpoint_interval: Optional[int] = None
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8

    @model_validator(mode="after")
    def _check(self) -> "TrainConfig":
        for label in ("steps", "batch_size", "seq_len", "eval_interval"):
            if getattr(self, label) < 1:
                raise ValueError(f"{label} must be positive, got {getattr(self, label)}")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and weight_decay must be non-negative")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ValueError(f"warmup_ratio must lie in [0, 1), got {self.warmup_ratio}")
        if not 0.0 <= self.min_lr_ratio <= 1.0:
            raise ValueError(f"min_lr_ratio must lie in [0, 1], got {self.min_lr_ratio}")
        if not self.clip_norm > 0:
            raise ValueError(f"clip_norm must be positive or inf, got {self.clip_norm}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        return self

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any]) -> "TrainConfig":
        try:
            return cls(**dict(values))
        except ValidationError as e:
            logger.error(f"Invalid training configuration: {e}")
            raise ConfigError(f"invalid training configuration: {e}") from e

    def derive(self, **changes: Any) -> "TrainConfig":
        return TrainConfig.from_mapping({**self.model_dump(), **changes})

    def check_model(self, model: ModelConfig) -> None:
        """
        Raises:
            ConfigError: If training windows are longer than the model context.
        """
        if self.seq_len > model.max_seq_len:
            raise ConfigError(
                f"seq_len {self.seq_len} exceeds max_seq_len {model.max_seq_len} "
                f"of {model.label}"
            )

    def to_mapping(self) -> Dict[str, Any]:
        return self.model_dump()

    @property
    def tokens_per_step(self) -> int:
        return self.batch_size * self.seq_len

    @property
    def clipping(self) -> bool:
        return self.clip_norm != inf
