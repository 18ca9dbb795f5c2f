from logging import Logger, basicConfig, getLogger, INFO
from typing import List, Optional, Tuple
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

from src.numerics.tensor import ShapeError, Tensor, matmul, mul, softmax_lastdim
from src.attention.mha import (
    AttentionParams,
    GateTensor,
    LayerMemory,
    apply_memory,
    split_heads,
)
from src.attention.rotary import RotaryTable


class CachePositionError(Exception):
    """
    Exception raised when a decode step does not match the cache length.
    """

    pass


@dataclass
class LayerKV:
    """
    Append-only keys and mixed values of one attention layer for one sequence,
    each (H, t, d_h). Rows are copied in and never rewritten.
    """

    n_heads: int
    head_dim: int
    keys: np.ndarray = field(default=None)
    values: np.ndarray = field(default=None)

    def __post_init__(self) -> None:
        empty = np.zeros((self.n_heads, 0, self.head_dim))
        self.keys = empty if self.keys is None else self.keys
        self.values = empty.copy() if self.values is None else self.values

    @property
    def length(self) -> int:
        return self.keys.shape[1]

    @property
    def floats_per_step(self) -> int:
        return 2 * self.n_heads * self.head_dim

    def append(self, key: np.ndarray, value: np.ndarray) -> None:
        """Appends one position; key/value are (H, d_h)."""
        expected = (self.n_heads, self.head_dim)
        if key.shape != expected or value.shape != expected:
            raise ShapeError(
                f"cache append expects {expected}, got {key.shape} and {value.shape}"
            )
        self.keys = np.concatenate([self.keys, key[:, None, :].copy()], axis=1)
        self.values = np.concatenate([self.values, value[:, None, :].copy()], axis=1)


@dataclass
class KVCache:
    """Per-layer caches for one sequence; ``position`` is the number of decoded tokens."""

    layers: List[object]

    @property
    def position(self) -> int:
        return self.layers[0].length if self.layers else 0

    def cached_floats(self) -> int:
        return sum(layer.floats_per_step * layer.length for layer in self.layers)


def decode_step(
    cache: LayerKV,
    x_t: Tensor,
    token: int,
    position: int,
    params: AttentionParams,
    memory: LayerMemory = None,
    rotary: Optional[RotaryTable] = None,
    capture: bool = False,
) -> Tuple[Tensor, Optional[GateTensor]]:
    """
    One incremental attention step for the newest position.
    Args:
        cache: This layer's cache, holding exactly ``position`` entries.
        x_t: Normalized hidden state (1, d) of the new token.
        token: Its token index (for memory retrieval).
        position: Its absolute position.
        params, memory, rotary: As in mha_forward.
        capture: Return the gates used.
    Returns:
        (output (1, d), gates or None). The cache grows by one entry.
    Raises:
        CachePositionError: If the cache length differs from ``position``.
    """
    if cache.length != position:
        raise CachePositionError(
            f"cache holds {cache.length} positions but step is at position {position}"
        )
    heads, head_dim = params.n_heads, params.head_dim
    q = split_heads(x_t, params.w_q, heads, head_dim)
    k = split_heads(x_t, params.w_k, heads, head_dim)
    v = split_heads(x_t, params.w_v, heads, head_dim)
    if rotary is not None:
        q = rotary.apply(q, start=position)
        k = rotary.apply(k, start=position)
    v_s, gates = apply_memory(x_t, v, np.array([token]), memory, capture)

    cache.append(k.numpy()[0], v_s.numpy()[0])

    q_h = Tensor(q.numpy().transpose(1, 0, 2))
    keys_t = Tensor(cache.keys.transpose(0, 2, 1))
    scores = mul(matmul(q_h, keys_t), 1.0 / np.sqrt(head_dim))
    weights = softmax_lastdim(scores)
    y = matmul(weights, Tensor(cache.values)).numpy()
    merged = Tensor(y.transpose(1, 0, 2).reshape(1, heads * head_dim))
    return matmul(merged, params.w_o), gates
