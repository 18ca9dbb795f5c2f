from logging import Logger, basicConfig, getLogger, INFO
from typing import Callable, Dict, List, Tuple
from dataclasses import dataclass, field
from math import cos, isinf, pi
from pathlib import Path
from sys import path
import numpy as np

basicConfig(
    level=INFO, format="%(asctime)s - %(levelname)s - %(funcName)s - %(message)s"
)
logger: Logger = getLogger(__name__)

root_path = Path(__file__).parent.parent.parent
path.append(str(root_path))

from src.numerics.tensor import Tensor


def warmup_steps(total_steps: int, warmup_ratio: float) -> int:
    return int(round(total_steps * warmup_ratio))


def cosine_lr(
    step: int, total_steps: int, peak: float, warmup_ratio: float, min_lr_ratio: float
) -> float:
    """
    Learning rate for 0-based ``step``: linear warmup to ``peak``, then cosine decay
    to ``peak * min_lr_ratio`` at the last step.
    """
    warmup = warmup_steps(total_steps, warmup_ratio)
    if step < warmup:
        return peak * (step + 1) / warmup
    floor = peak * min_lr_ratio
    span = max(1, total_steps - warmup - 1)
    progress = min(1.0, (step - warmup) / span)
    return floor + (peak - floor) * 0.5 * (1.0 + cos(pi * progress))


def global_norm(grads: Dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_global_norm(
    grads: Dict[str, np.ndarray], max_norm: float
) -> Tuple[Dict[str, np.ndarray], float]:
    """
    Rescales all gradients by max_norm / norm when their joint norm exceeds max_norm.
    Returns:
        (gradients, pre-clip norm). The input mapping is returned as-is when no
        scaling applies.
    """
    norm = global_norm(grads)
    if isinf(max_norm) or norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    return {name: g * scale for name, g in grads.items()}, norm


@dataclass
class AdamW:
    """
    Adam with decoupled weight decay over named parameters.

    Each step first shrinks decayed parameters by (1 - lr * weight_decay), then
    applies the bias-corrected Adam update.
    """

    named_params: List[Tuple[str, Tensor]]
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.0
    decay_filter: Callable[[str], bool] = lambda name: True
    step_count: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name, tensor in self.named_params:
            self.m.setdefault(name, np.zeros_like(tensor.data))
            self.v.setdefault(name, np.zeros_like(tensor.data))

    def step(self, grads: Dict[str, np.ndarray], lr: float) -> None:
        """
        Applies one update in place (bumping each tensor's version).
        Args:
            grads: Gradient per parameter name; missing names count as zero.
            lr: Learning rate for this step.
        """
        self.step_count += 1
        t = self.step_count
        correction1 = 1.0 - self.beta1**t
        correction2 = 1.0 - self.beta2**t
        for name, tensor in self.named_params:
            grad = grads.get(name)
            if grad is None:
                grad = np.zeros_like(tensor.data)
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * grad
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * grad * grad
            if lr == 0.0:
                continue
            update = (self.m[name] / correction1) / (
                np.sqrt(self.v[name] / correction2) + self.eps
            )
            value = tensor.data
            if self.weight_decay and self.decay_filter(name):
                value = value * (1.0 - lr * self.weight_decay)
            tensor.assign(value - lr * update)

    def state_arrays(self) -> Dict[str, np.ndarray]:
        """Moments keyed ``m.<name>`` / ``v.<name>`` for checkpointing."""
        arrays: Dict[str, np.ndarray] = {}
        for name, _ in self.named_params:
            arrays[f"m.{name}"] = self.m[name]
            arrays[f"v.{name}"] = self.v[name]
        return arrays

    def load_state(self, step_count: int, arrays: Dict[str, np.ndarray]) -> None:
        for name, _ in self.named_params:
            self.m[name] = np.array(arrays[f"m.{name}"], copy=True)
            self.v[name] = np.array(arrays[f"v.{name}"], copy=True)
        self.step_count = int(step_count)
        logger.info(f"Optimizer state restored at step {self.step_count}")
