from logging import Logger, basicConfig, getLogger, INFO
from typing import Iterator, Optional, Tuple
from dataclasses import dataclass
from pathlib import Path
from sys import path
import numpy as np

basicConfig(
    level=INFO, format="%(asctime)s - %(levelname)s - %(funcName)s - %(message)s"
)
logger: Logger = getLogger(__name__)

root_path = Path(__file__).parent.parent.parent
path.append(str(root_path))

from src.data.tokenizer import BYTE_VOCAB, TokenSequence, read_text, split_holdout


class CorpusError(ValueError):
    """
    Exception raised when a corpus cannot supply what was asked of it.
    """

    pass


@dataclass
class Batch:
    """Inputs and next-token targets, each (B, T); ``index`` counts batches drawn."""

    inputs: np.ndarray
    targets: np.ndarray
    index: int


@dataclass
class TaskData:
    """
    Everything a training run consumes: a training stream and fixed eval windows.

    Attributes:
        eval_mask: 0/1 weights over eval targets, or None to score every target.
        eval_bytes: Raw bytes covered by the scored targets.
    """

    name: str
    vocab_size: int
    train_tokens: np.ndarray
    eval_inputs: np.ndarray
    eval_targets: np.ndarray
    eval_mask: Optional[np.ndarray]
    eval_bytes: int


def window_count(length: int, seq_len: int) -> int:
    return max(0, (length - 1) // seq_len)


def _windows(tokens: np.ndarray, seq_len: int) -> np.ndarray:
    count = window_count(tokens.shape[0], seq_len)
    if count == 0:
        return np.zeros((0, seq_len + 1), dtype=np.int64)
    starts = np.arange(count) * seq_len
    return np.stack([tokens[s : s + seq_len + 1] for s in starts])


def shard_stream(
    tokens: np.ndarray, seq_len: int, batch_size: int, seed: int, start_batch: int = 0
) -> Iterator[Batch]:
    """
    One epoch of shuffled training batches. Windows of T+1 tokens are cut at
    stride T; the final partial window and any partial batch are dropped. The
    order depends only on ``seed``.
    Args:
        tokens: 1-D token stream.
        seq_len: T.
        batch_size: Windows per batch.
        seed: Shuffle seed.
        start_batch: Batches to skip (for resumption).
    Raises:
        CorpusError: If the stream is shorter than T+1 or yields no full batch.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.shape[0] < seq_len + 1:
        raise CorpusError(
            f"stream of {tokens.shape[0]} tokens is shorter than one window of {seq_len + 1}"
        )
    windows = _windows(tokens, seq_len)
    per_epoch = windows.shape[0] // batch_size
    if per_epoch == 0:
        raise CorpusError(
            f"{windows.shape[0]} windows cannot fill one batch of {batch_size}"
        )
    order = np.random.default_rng(seed).permutation(windows.shape[0])
    for index in range(start_batch, per_epoch):
        chosen = windows[order[index * batch_size : (index + 1) * batch_size]]
        yield Batch(chosen[:, :-1].copy(), chosen[:, 1:].copy(), index)


def batches_per_epoch(length: int, seq_len: int, batch_size: int) -> int:
    return window_count(length, seq_len) // batch_size


def training_batches(
    tokens: np.ndarray, seq_len: int, batch_size: int, seed: int, steps: int, start: int = 0
) -> Iterator[Batch]:
    """
    Exactly ``steps - start`` batches, repeating epochs as needed. Batch k is the
    same whether or not the first ``start`` batches were drawn.
    """
    per_epoch = batches_per_epoch(len(tokens), seq_len, batch_size)
    drawn = start
    while drawn < steps:
        epoch_offset = drawn % per_epoch if per_epoch else 0
        for batch in shard_stream(tokens, seq_len, batch_size, seed, epoch_offset):
            if drawn >= steps:
                return
            yield Batch(batch.inputs, batch.targets, drawn)
            drawn += 1


def eval_windows(
    tokens: np.ndarray, seq_len: int, max_windows: Optional[int] = None
) -> Tuple[np.ndarray, np.ndarray]:
    """Sequential non-overlapping eval windows (inputs, targets), partial window dropped."""
    windows = _windows(np.asarray(tokens, dtype=np.int64), seq_len)
    if windows.shape[0] == 0:
        raise CorpusError(f"eval stream too short for a window of {seq_len + 1}")
    if max_windows is not None:
        windows = windows[:max_windows]
    return windows[:, :-1].copy(), windows[:, 1:].copy()


def text_task(source: Path, seq_len: int, max_eval_windows: Optional[int] = None) -> TaskData:
    """Byte-level text task: last 5% of the stream held out for evaluation."""
    train, held = split_holdout(read_text(source))
    inputs, targets = eval_windows(held.tokens, seq_len, max_eval_windows)
    return text_task_from_sequences(Path(source).name, train, inputs, targets)


def text_task_from_sequences(
    name: str, train: TokenSequence, inputs: np.ndarray, targets: np.ndarray
) -> TaskData:
    return TaskData(
        name=name,
        vocab_size=BYTE_VOCAB,
        train_tokens=train.tokens,
        eval_inputs=inputs,
        eval_targets=targets,
        eval_mask=None,
        eval_bytes=int(targets.size),
    )
