from logging import Logger, basicConfig, getLogger, INFO
from dataclasses import asdict, dataclass
from typing import Any, Dict
from math import log

basicConfig(
    level=INFO, format="%(asctime)s - %(levelname)s - %(funcName)s - %(message)s"
)
logger: Logger = getLogger(__name__)

LN2: float = log(2.0)


@dataclass(frozen=True)
class EvalReport:
    """
    Evaluation totals for one model.

    Attributes:
        total_loss_nats (float): Summed cross-entropy over evaluated targets.
        token_count (int): Evaluated target positions.
        byte_count (int): Raw UTF-8 bytes those targets cover.
        bpb (float): total_loss_nats / (ln 2 * byte_count).
        label (str): Variant label.
    """

    total_loss_nats: float
    token_count: int
    byte_count: int
    bpb: float
    label: str = ""

    @property
    def loss_per_token(self) -> float:
        return self.total_loss_nats / self.token_count if self.token_count else 0.0

    def to_record(self) -> Dict[str, Any]:
        return asdict(self)


def bits_per_byte(
    total_loss_nats: float, token_count: int, byte_count: int, label: str = ""
) -> EvalReport:
    """
    Converts summed nats into bits per raw byte.
    Raises:
        ValueError: If ``byte_count`` is not positive.
    """
    if byte_count <= 0:
        raise ValueError(f"bits_per_byte needs a positive byte count, got {byte_count}")
    bpb = float(total_loss_nats) / (LN2 * byte_count)
    return EvalReport(float(total_loss_nats), int(token_count), int(byte_count), bpb, label)
