from pydantic import BaseModel, ConfigDict, ValidationError, model_validator
from typing import Any, Dict, List, Mapping, Tuple
from logging import Logger, basicConfig, getLogger, INFO
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

from src.data.stream import CorpusError, TaskData

EOS: int = 0
SEP: int = 1
KEY_OFFSET: int = 2
HEADER_PREFIX: str = "# movelab-facts"
EVAL_STREAM: int = 1


class FactTaskSpec(BaseModel):
    """
    Synthetic key -> definition recall task.

    Records read ``<key tokens> <SEP> <definition tokens> <EOS>``; the training
    stream repeats every fact ``train_repeats`` times in shuffled order.
    ``key_length`` > 1 lets ``n_facts`` exceed ``key_vocab``.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    key_vocab: int
    n_facts: int
    key_length: int = 1
    definition_length: int = 4
    definition_vocab: int = 64
    train_repeats: int = 10
    seed: int = 0

    @model_validator(mode="after")
    def _check(self) -> "FactTaskSpec":
        for label in (
            "key_vocab",
            "n_facts",
            "key_length",
            "definition_length",
            "definition_vocab",
            "train_repeats",
        ):
            if getattr(self, label) < 1:
                raise ValueError(f"{label} must be positive, got {getattr(self, label)}")
        return self

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any]) -> "FactTaskSpec":
        try:
            return cls(**dict(values))
        except ValidationError as e:
            raise CorpusError(f"invalid fact task: {e}") from e

    @property
    def key_space(self) -> int:
        return self.key_vocab**self.key_length

    @property
    def definition_offset(self) -> int:
        return KEY_OFFSET + self.key_vocab

    @property
    def vocab_size(self) -> int:
        return self.definition_offset + self.definition_vocab

    @property
    def record_length(self) -> int:
        return self.key_length + 1 + self.definition_length + 1


@dataclass
class FactCorpus:
    """
    A generated fact table with its training stream and eval records.

    Attributes:
        keys: (n_facts, key_length) key token ids.
        definitions: (n_facts, definition_length) definition token ids.
        train_tokens: Training stream, starting with EOS.
        eval_records: (n_facts, record_length + 1) standalone records, each
            preceded by EOS, in an order not used for training.
    """

    spec: FactTaskSpec
    keys: np.ndarray
    definitions: np.ndarray
    train_tokens: np.ndarray
    eval_records: np.ndarray

    @property
    def table(self) -> Dict[Tuple[int, ...], Tuple[int, ...]]:
        return {
            tuple(k.tolist()): tuple(d.tolist()) for k, d in zip(self.keys, self.definitions)
        }

    @property
    def eval_mask(self) -> np.ndarray:
        """1 on targets that are definition tokens, 0 elsewhere."""
        spec = self.spec
        mask = np.zeros((self.eval_records.shape[0], spec.record_length))
        first = spec.key_length + 1
        mask[:, first : first + spec.definition_length] = 1.0
        return mask

    def task(self) -> TaskData:
        """Eval bytes equal the number of scored definition tokens."""
        mask = self.eval_mask
        return TaskData(
            name=f"facts-{self.spec.n_facts}-seed{self.spec.seed}",
            vocab_size=self.spec.vocab_size,
            train_tokens=self.train_tokens,
            eval_inputs=self.eval_records[:, :-1].copy(),
            eval_targets=self.eval_records[:, 1:].copy(),
            eval_mask=mask,
            eval_bytes=int(mask.sum()),
        )


def _records(keys: np.ndarray, definitions: np.ndarray) -> np.ndarray:
    n = keys.shape[0]
    sep = np.full((n, 1), SEP, dtype=np.int64)
    eos = np.full((n, 1), EOS, dtype=np.int64)
    return np.concatenate([keys, sep, definitions, eos], axis=1)


def gen_fact_corpus(spec: FactTaskSpec) -> FactCorpus:
    """
    Deterministic fact table and streams for ``spec.seed``.
    Raises:
        CorpusError: If more facts are requested than distinct keys exist.
    """
    if spec.n_facts > spec.key_space:
        raise CorpusError(
            f"{spec.n_facts} facts oversubscribe {spec.key_space} distinct keys "
            f"({spec.key_vocab}^{spec.key_length})"
        )
    rng = np.random.default_rng(spec.seed)
    codes = rng.choice(spec.key_space, size=spec.n_facts, replace=False)
    digits = [
        (codes // spec.key_vocab**p) % spec.key_vocab
        for p in reversed(range(spec.key_length))
    ]
    keys = np.stack(digits, axis=1).astype(np.int64) + KEY_OFFSET
    definitions = (
        rng.integers(0, spec.definition_vocab, size=(spec.n_facts, spec.definition_length))
        + spec.definition_offset
    ).astype(np.int64)
    records = _records(keys, definitions)

    order_rng = np.random.default_rng([spec.seed, 0])
    chunks: List[np.ndarray] = [np.array([EOS], dtype=np.int64)]
    for _ in range(spec.train_repeats):
        chunks.append(records[order_rng.permutation(spec.n_facts)].reshape(-1))
    train_tokens = np.concatenate(chunks)

    eval_order = np.random.default_rng([spec.seed, EVAL_STREAM]).permutation(spec.n_facts)
    eos = np.full((spec.n_facts, 1), EOS, dtype=np.int64)
    eval_records = np.concatenate([eos, records[eval_order]], axis=1)
    logger.info(
        f"Generated {spec.n_facts} facts: {train_tokens.size} training tokens, "
        f"vocab {spec.vocab_size}"
    )
    return FactCorpus(spec, keys, definitions, train_tokens, eval_records)


def write_fact_corpus(corpus: FactCorpus, target: Path) -> Path:
    """Line-oriented text: a header naming the spec and seed, then one fact per line."""
    spec = corpus.spec
    fields = " ".join(f"{k}={v}" for k, v in spec.model_dump().items())
    lines = [f"{HEADER_PREFIX} {fields}"]
    for key, definition in zip(corpus.keys, corpus.definitions):
        key_text = " ".join(str(int(t)) for t in key)
        definition_text = " ".join(str(int(t)) for t in definition)
        lines.append(f"{key_text}\t{definition_text}")
    try:
        target = Path(target)
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text("\n".join(lines) + "\n", encoding="utf-8")
        logger.info(f"Fact corpus written: {target}")
        return target
    except OSError as e:
        logger.error(f"Error writing fact corpus {target}: {e}")
        raise


def read_fact_corpus(source: Path) -> FactCorpus:
    """
    Rebuilds a corpus from its header and checks the stored table against it.
    Raises:
        CorpusError: On a malformed header or a table that does not match the seed.
    """
    source = Path(source)
    lines = source.read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith(HEADER_PREFIX):
        raise CorpusError(f"{source} has no '{HEADER_PREFIX}' header")
    try:
        values = dict(item.split("=", 1) for item in lines[0][len(HEADER_PREFIX) :].split())
        spec = FactTaskSpec.from_mapping({k: int(v) for k, v in values.items()})
    except ValueError as e:
        raise CorpusError(f"malformed header in {source}: {e}") from e

    corpus = gen_fact_corpus(spec)
    stored: Dict[Tuple[int, ...], Tuple[int, ...]] = {}
    for line in lines[1:]:
        key_text, _, definition_text = line.partition("\t")
        key = tuple(int(t) for t in key_text.split())
        if key in stored:
            raise CorpusError(f"key {key} appears twice in {source}")
        stored[key] = tuple(int(t) for t in definition_text.split())
    if stored != corpus.table:
        raise CorpusError(f"fact table in {source} does not match its header seed")
    return corpus
