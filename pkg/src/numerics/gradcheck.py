from typing import Callable, Dict, List, Optional, Sequence, Tuple
from logging import Logger, basicConfig, getLogger, INFO
from dataclasses import dataclass, field
from pathlib import Path
from sys import path
import numpy as np

basicConfig(
    level=INFO, format="%(asctime)s - %(levelname)s - %(funcName)s - %(message)s"
)
logger: Logger = getLogger(__name__)

root_path = Path(__file__).parent.parent.parent
path.append(str(root_path))

from src.numerics.tensor import Tape, Tensor, backward

FD_STEP: float = 1e-5
DENOMINATOR_FLOOR: float = 1e-8


@dataclass
class GradCheckReport:
    """
    Outcome of a finite-difference comparison.

    Attributes:
        max_relative_error: Max of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
        per_leaf: Max relative error per leaf label.
        non_finite: (leaf label, flat index) for every element whose numeric derivative
            was not finite; these are excluded from the maximum.
        checked: Number of elements compared.
    """

    max_relative_error: float = 0.0
    per_leaf: Dict[str, float] = field(default_factory=dict)
    non_finite: List[Tuple[str, int]] = field(default_factory=list)
    checked: int = 0

    @property
    def worst_leaf(self) -> Optional[str]:
        if not self.per_leaf:
            return None
        return max(self.per_leaf, key=self.per_leaf.get)


def relative_error(analytic: float, numeric: float) -> float:
    denominator = max(abs(analytic), abs(numeric), DENOMINATOR_FLOOR)
    return abs(analytic - numeric) / denominator


def grad_check(
    f: Callable[[], Tensor],
    leaves: Sequence[Tensor],
    max_samples: int = 16,
    step: float = FD_STEP,
    seed: int = 0,
) -> GradCheckReport:
    """
    Compares tape gradients of ``f`` with central finite differences.
    Args:
        f: Deterministic closure returning a scalar Tensor built from ``leaves``.
        leaves: Trainable tensors to check.
        max_samples: Elements sampled per leaf (all elements if the leaf is smaller).
        step: Central-difference step.
        seed: Sampling seed.
    Returns:
        GradCheckReport with the maximum relative error.
    """
    with Tape() as tape:
        loss = f()
    analytic = backward(loss, tape, leaves)
    rng = np.random.default_rng(seed)
    report = GradCheckReport()

    for position, leaf in enumerate(leaves):
        label = leaf.name or f"leaf{position}"
        flat = leaf.data.reshape(-1)
        count = flat.size
        chosen = (
            np.arange(count)
            if count <= max_samples
            else np.sort(rng.choice(count, size=max_samples, replace=False))
        )
        grad_flat = analytic[leaf].reshape(-1)
        worst = 0.0
        for index in chosen:
            original = flat[index]
            flat[index] = original + step
            plus = f().item()
            flat[index] = original - step
            minus = f().item()
            flat[index] = original
            numeric = (plus - minus) / (2.0 * step)
            if not np.isfinite(numeric):
                report.non_finite.append((label, int(index)))
                logger.warning(f"Non-finite numeric derivative at {label}[{index}]")
                continue
            worst = max(worst, relative_error(float(grad_flat[index]), numeric))
            report.checked += 1
        report.per_leaf[label] = worst
        report.max_relative_error = max(report.max_relative_error, worst)

    logger.info(
        f"Gradient check: {report.checked} elements, "
        f"max relative error {report.max_relative_error:.3e} ({report.worst_leaf})"
    )
    return report
