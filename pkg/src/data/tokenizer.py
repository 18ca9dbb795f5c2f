from logging import Logger, basicConfig, getLogger, INFO
from typing import Sequence, Tuple, Union
from dataclasses import dataclass
from pathlib import Path
import numpy as np

basicConfig(
    level=INFO, format="%(asctime)s - %(levelname)s - %(funcName)s - %(message)s"
)
logger: Logger = getLogger(__name__)

BYTE_VOCAB: int = 256
BIGRAM_VOCAB: int = BYTE_VOCAB + BYTE_VOCAB * BYTE_VOCAB
HOLDOUT_FRACTION: float = 0.05


class TokenizerError(ValueError):
    """
    Exception raised when text is not valid UTF-8 or tokens do not decode.
    """

    pass


@dataclass
class TokenSequence:
    """
    Token indices plus the raw UTF-8 byte count of the text they came from.
    """

    tokens: np.ndarray
    byte_length: int

    def __len__(self) -> int:
        return int(self.tokens.shape[0])


def _utf8(text: Union[str, bytes]) -> bytes:
    if isinstance(text, bytes):
        try:
            text.decode("utf-8")
        except UnicodeDecodeError as e:
            raise TokenizerError(f"invalid UTF-8 at byte {e.start}") from e
        return text
    try:
        return text.encode("utf-8")
    except UnicodeEncodeError as e:
        raise TokenizerError(f"text is not encodable as UTF-8 at {e.start}") from e


def tokenize_bytes(text: Union[str, bytes]) -> TokenSequence:
    """One token per UTF-8 byte (vocabulary 256)."""
    raw = _utf8(text)
    return TokenSequence(np.frombuffer(raw, dtype=np.uint8).astype(np.int64), len(raw))


def detokenize(tokens: Sequence[int]) -> str:
    """
    Inverse of ``tokenize_bytes``.
    Raises:
        TokenizerError: If a token is not a byte or the bytes are not UTF-8.
    """
    values = np.asarray(tokens, dtype=np.int64)
    if values.size and (values.min() < 0 or values.max() >= BYTE_VOCAB):
        raise TokenizerError("byte tokens must lie in [0, 256)")
    try:
        return bytes(values.astype(np.uint8).tolist()).decode("utf-8")
    except UnicodeDecodeError as e:
        raise TokenizerError(f"tokens do not decode as UTF-8 at byte {e.start}") from e


def tokenize_bigrams(text: Union[str, bytes]) -> TokenSequence:
    """
    Pairs of bytes as single tokens (256 + 256*a + b); an odd trailing byte stays a
    byte token. Only used to show that bits per byte ignore the tokenizer.
    """
    raw = _utf8(text)
    values = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    paired = values[: len(values) // 2 * 2].reshape(-1, 2)
    tokens = BYTE_VOCAB + paired[:, 0] * BYTE_VOCAB + paired[:, 1]
    if len(values) % 2:
        tokens = np.append(tokens, values[-1])
    return TokenSequence(tokens, len(raw))


def split_holdout(
    sequence: TokenSequence, fraction: float = HOLDOUT_FRACTION
) -> Tuple[TokenSequence, TokenSequence]:
    """Reserves the final ``fraction`` of a byte-tokenized stream for evaluation."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"holdout fraction must lie in (0, 1), got {fraction}")
    cut = len(sequence) - int(round(len(sequence) * fraction))
    train, held = sequence.tokens[:cut], sequence.tokens[cut:]
    return TokenSequence(train, int(train.size)), TokenSequence(held, int(held.size))


def read_text(source: Path) -> TokenSequence:
    """Reads a UTF-8 text file into byte tokens."""
    source = Path(source)
    try:
        sequence = tokenize_bytes(source.read_bytes())
        logger.info(f"Loaded {sequence.byte_length} bytes from {source}")
        return sequence
    except OSError as e:
        logger.error(f"Error reading corpus {source}: {e}")
        raise
