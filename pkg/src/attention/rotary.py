from logging import Logger, basicConfig, getLogger, INFO
from typing import Tuple
from pathlib import Path
from sys import path
import numpy as np

basicConfig(
    level=INFO, format="%(asctime)s - %(levelname)s - %(funcName)s - %(message)s"
)
logger: Logger = getLogger(__name__)

root_path = Path(__file__).parent.parent.parent
path.append(str(root_path))

from src.numerics.tensor import ShapeError, Tensor, rotary

ROPE_BASE: float = 10000.0


class RotaryTable:
    """
    Precomputed rotary angles for positions [0, max_positions).

    Attributes:
        head_dim (int): Per-head width (even).
        cos (np.ndarray): (max_positions, head_dim) cosines, halves duplicated.
        sin (np.ndarray): (max_positions, head_dim) sines, halves duplicated.
    """

    def __init__(self, head_dim: int, max_positions: int, base: float = ROPE_BASE) -> None:
        if head_dim % 2:
            raise ShapeError(f"rotary head_dim must be even, got {head_dim}")
        half = head_dim // 2
        inv_freq = base ** (-np.arange(half, dtype=np.float64) / half)
        angles = np.arange(max_positions, dtype=np.float64)[:, None] * inv_freq[None, :]
        self.head_dim: int = head_dim
        self.max_positions: int = max_positions
        self.cos: np.ndarray = np.concatenate([np.cos(angles)] * 2, axis=-1)
        self.sin: np.ndarray = np.concatenate([np.sin(angles)] * 2, axis=-1)

    def window(self, start: int, length: int) -> Tuple[np.ndarray, np.ndarray]:
        """Returns (cos, sin) shaped (length, 1, head_dim) to broadcast over heads."""
        if start + length > self.max_positions:
            raise ShapeError(
                f"positions [{start}, {start + length}) exceed rotary table "
                f"of {self.max_positions}"
            )
        cos = self.cos[start : start + length][:, None, :]
        sin = self.sin[start : start + length][:, None, :]
        return cos, sin

    def apply(self, x: Tensor, start: int = 0) -> Tensor:
        """Rotates x of shape (..., T, H, head_dim) for positions start..start+T-1."""
        cos, sin = self.window(start, x.shape[-3])
        return rotary(x, cos, sin)
