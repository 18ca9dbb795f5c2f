from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple
from logging import Logger, basicConfig, getLogger, INFO
from pandas import DataFrame, read_csv
from dataclasses import dataclass
from json import dumps, loads
from pathlib import Path
from sys import path
import numpy as np

basicConfig(
    level=INFO, format="%(asctime)s - %(levelname)s - %(funcName)s - %(message)s"
)
logger: Logger = getLogger(__name__)

root_path = Path(__file__).parent.parent.parent
path.append(str(root_path))

from src.model.transformer import ModelParams, forward_logits
from src.utils.config_loader import CONTEXTS, ROLES
from src.data.tokenizer import tokenize_bytes

TraceFormat = Literal["csv", "jsonl"]
TraceTokenizer = Literal["bytes", "ids"]
TRACE_COLUMNS: List[str] = ["layer", "slot", "value", "context", "sentence", "kind", "normalized"]
HEAD_COLUMNS: List[str] = ["layer", "head", "slot", "value", "context", "sentence"]
DIFF_KINDS: Tuple[str, ...] = ("control", "semantic")
GATE_CEILING: float = 2.0


class TraceError(ValueError):
    """
    Exception raised when a gate trace cannot be captured or compared.
    """

    pass


@dataclass
class GateTrace:
    """
    Memory-slot gates of one target occurrence set.

    Attributes:
        values: (L, M) gates averaged over heads and target positions.
        per_head: (L, H, M) gates averaged over target positions only.
        context: short, medium or long.
        sentence: A1, A2 or B1.
        target: Target token ids.
        positions: Positions averaged over.
    """

    values: np.ndarray
    per_head: np.ndarray
    context: str
    sentence: str
    target: Tuple[int, ...]
    positions: Tuple[int, ...]

    @property
    def n_layers(self) -> int:
        return self.values.shape[0]

    @property
    def n_slots(self) -> int:
        return self.values.shape[1]


@dataclass
class TraceDiff:
    """
    Control |A1 - A2| and semantic |A1 - B1| differences for one context, divided
    by a global maximum shared across all contexts of the word.
    """

    context: str
    control: np.ndarray
    semantic: np.ndarray
    global_max: float
    degenerate: bool
    normalized_control: np.ndarray
    normalized_semantic: np.ndarray

    @property
    def control_score(self) -> float:
        return float(self.normalized_control.mean())

    @property
    def semantic_score(self) -> float:
        """Mean of the normalized semantic difference."""
        return float(self.normalized_semantic.mean())


def target_positions(tokens: np.ndarray, target: Sequence[int]) -> Tuple[int, ...]:
    """Every position covered by an occurrence of ``target`` in ``tokens``."""
    tokens = np.asarray(tokens)
    width = len(target)
    if width == 0:
        raise TraceError("empty target")
    found: List[int] = []
    for start in range(tokens.shape[0] - width + 1):
        if tuple(tokens[start : start + width].tolist()) == tuple(target):
            found.extend(range(start, start + width))
    return tuple(sorted(set(found)))


def capture_trace(
    params: ModelParams,
    tokens: np.ndarray,
    target: Sequence[int],
    positions: Optional[Sequence[int]] = None,
    context: str = "",
    sentence: str = "",
) -> GateTrace:
    """
    Runs one forward pass with gate capture and averages memory-slot gates over
    the target positions (and over heads for ``values``).
    Args:
        params: A MoVE-variant model.
        tokens: (T,) token ids.
        target: Target token ids.
        positions: Explicit positions; None locates every occurrence of ``target``.
    Raises:
        TraceError: For non-MoVE models or when the target is absent.
    """
    config = params.config
    if config.memory_kind != "move":
        raise TraceError(f"gate traces need a MoVE variant, got '{config.variant}'")
    tokens = np.asarray(tokens, dtype=np.int64)
    target = tuple(int(t) for t in target)
    if positions is None:
        positions = target_positions(tokens, target)
    positions = tuple(int(p) for p in positions)
    if not positions:
        raise TraceError(f"target {target} does not occur in the {tokens.shape[0]} tokens")
    if min(positions) < 0 or max(positions) >= tokens.shape[0]:
        raise TraceError(f"positions {positions} fall outside the sequence")

    captured = forward_logits(params, tokens, capture=True).gates
    index = list(positions)
    per_head = np.stack([g.memory_slots[index].mean(axis=0) for g in captured])
    return GateTrace(
        values=per_head.mean(axis=1),
        per_head=per_head,
        context=context,
        sentence=sentence,
        target=target,
        positions=positions,
    )


def encode_sentence(text: str, tokenizer: TraceTokenizer) -> np.ndarray:
    if tokenizer == "bytes":
        return tokenize_bytes(text).tokens
    try:
        return np.array([int(t) for t in text.split()], dtype=np.int64)
    except ValueError as e:
        raise TraceError(f"'{text}' is not a list of token ids") from e


def trace_sentences(
    params: ModelParams,
    sentences: Dict[Tuple[str, str], str],
    target: str,
    tokenizer: TraceTokenizer = "bytes",
) -> Dict[Tuple[str, str], GateTrace]:
    """Captures one trace per (context, role) sentence."""
    target_ids = tuple(encode_sentence(target, tokenizer).tolist())
    traces: Dict[Tuple[str, str], GateTrace] = {}
    for (context, role), text in sentences.items():
        tokens = encode_sentence(text, tokenizer)
        try:
            traces[(context, role)] = capture_trace(
                params, tokens, target_ids, context=context, sentence=role
            )
        except TraceError as e:
            raise TraceError(f"{context}/{role}: {e}") from e
    logger.info(f"Captured {len(traces)} traces for target '{target}'")
    return traces


def diff_traces(traces: Dict[Tuple[str, str], GateTrace]) -> Dict[str, TraceDiff]:
    """
    Control and semantic differences per context, normalized by the maximum over
    every difference of every context. A zero maximum skips normalization and
    marks each diff degenerate.
    Raises:
        TraceError: If a role is missing or trace shapes disagree.
    """
    contexts = sorted({c for c, _ in traces}, key=lambda c: (CONTEXTS + (c,)).index(c))
    shape: Optional[Tuple[int, ...]] = None
    for context in contexts:
        for role in ROLES:
            trace = traces.get((context, role))
            if trace is None:
                raise TraceError(f"missing trace {context}/{role}")
            if shape is not None and trace.values.shape != shape:
                raise TraceError(f"trace shapes differ: {trace.values.shape} vs {shape}")
            shape = trace.values.shape

    raw: Dict[str, Tuple[np.ndarray, np.ndarray]] = {}
    for context in contexts:
        a1 = traces[(context, "A1")].values
        raw[context] = (
            np.abs(a1 - traces[(context, "A2")].values),
            np.abs(a1 - traces[(context, "B1")].values),
        )
    global_max = max(float(max(c.max(), s.max())) for c, s in raw.values())
    degenerate = global_max == 0.0
    if degenerate:
        logger.warning("All trace differences are zero; normalization skipped")

    diffs: Dict[str, TraceDiff] = {}
    for context, (control, semantic) in raw.items():
        scale = 1.0 if degenerate else global_max
        diffs[context] = TraceDiff(
            context=context,
            control=control,
            semantic=semantic,
            global_max=global_max,
            degenerate=degenerate,
            normalized_control=control / scale,
            normalized_semantic=semantic / scale,
        )
    return diffs


def _grid_rows(
    values: np.ndarray, context: str, sentence: str, kind: str, normalized: bool
) -> List[Dict[str, Any]]:
    layers, slots = values.shape
    return [
        {
            "layer": layer,
            "slot": slot + 1,
            "value": float(values[layer, slot]),
            "context": context,
            "sentence": sentence,
            "kind": kind,
            "normalized": normalized,
        }
        for layer in range(layers)
        for slot in range(slots)
    ]


def raw_frame(trace: GateTrace) -> DataFrame:
    """L*M rows of one raw trace; slots are numbered from 1."""
    rows = _grid_rows(trace.values, trace.context, trace.sentence, "raw", False)
    return DataFrame(rows, columns=TRACE_COLUMNS)


def trace_frame(
    traces: Dict[Tuple[str, str], GateTrace], diffs: Dict[str, TraceDiff]
) -> DataFrame:
    """
    Full grid: per context the three raw traces plus the normalized control and
    semantic differences (raw differences when degenerate).
    """
    rows: List[Dict[str, Any]] = []
    for context, diff in diffs.items():
        for role in ROLES:
            rows.extend(_grid_rows(traces[(context, role)].values, context, role, "raw", False))
        normalized = not diff.degenerate
        rows.extend(
            _grid_rows(diff.normalized_control, context, "A1-A2", "control", normalized)
        )
        rows.extend(
            _grid_rows(diff.normalized_semantic, context, "A1-B1", "semantic", normalized)
        )
    return DataFrame(rows, columns=TRACE_COLUMNS)


def per_head_frame(traces: Dict[Tuple[str, str], GateTrace]) -> DataFrame:
    """Unaveraged (L, H, M) gates of every trace."""
    rows: List[Dict[str, Any]] = []
    for trace in traces.values():
        layers, heads, slots = trace.per_head.shape
        for layer in range(layers):
            for head in range(heads):
                for slot in range(slots):
                    rows.append(
                        {
                            "layer": layer,
                            "head": head,
                            "slot": slot + 1,
                            "value": float(trace.per_head[layer, head, slot]),
                            "context": trace.context,
                            "sentence": trace.sentence,
                        }
                    )
    return DataFrame(rows, columns=HEAD_COLUMNS)


def summary_frame(diffs: Dict[str, TraceDiff]) -> DataFrame:
    return DataFrame(
        [
            {
                "context": context,
                "global_max": diff.global_max,
                "degenerate": diff.degenerate,
                "control_score": diff.control_score,
                "semantic_score": diff.semantic_score,
            }
            for context, diff in diffs.items()
        ]
    )


def export_trace(frame: DataFrame, target: Path, fmt: TraceFormat = "csv") -> Path:
    """
    Writes a trace table as comma-separated text (header row, UTF-8, LF) or as
    JSON lines, one record per cell. Floats keep their shortest exact repr.
    """
    target = Path(target)
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        if fmt == "csv":
            frame.to_csv(target, index=False, lineterminator="\n", encoding="utf-8")
        elif fmt == "jsonl":
            with open(target, "w", encoding="utf-8", newline="\n") as f:
                for record in frame.to_dict(orient="records"):
                    f.write(dumps(_plain(record)) + "\n")
        else:
            raise TraceError(f"unknown export format '{fmt}'")
        logger.info(f"Trace table written: {target} ({len(frame)} rows)")
        return target
    except OSError as e:
        logger.error(f"Error writing trace table {target}: {e}")
        raise


def _plain(record: Dict[str, Any]) -> Dict[str, Any]:
    return {k: v.item() if isinstance(v, np.generic) else v for k, v in record.items()}


def import_trace(source: Path) -> DataFrame:
    """Reads a table written by ``export_trace`` (format from the file suffix)."""
    source = Path(source)
    if source.suffix == ".jsonl":
        with open(source, "r", encoding="utf-8") as f:
            records = [loads(line) for line in f if line.strip()]
        columns = list(records[0]) if records else TRACE_COLUMNS
        return DataFrame(records, columns=columns)
    frame = read_csv(source, float_precision="round_trip", keep_default_na=False)
    return frame


def grid_array(frame: DataFrame, context: str, sentence: str, kind: str) -> np.ndarray:
    """Rebuilds the (L, M) array of one table from exported rows."""
    rows = frame[
        (frame["context"] == context) & (frame["sentence"] == sentence) & (frame["kind"] == kind)
    ]
    if rows.empty:
        raise TraceError(f"no rows for {context}/{sentence}/{kind}")
    layers = int(rows["layer"].max()) + 1
    slots = int(rows["slot"].max())
    values = np.zeros((layers, slots))
    values[rows["layer"].to_numpy(dtype=int), rows["slot"].to_numpy(dtype=int) - 1] = rows[
        "value"
    ].to_numpy(dtype=np.float64)
    return values
