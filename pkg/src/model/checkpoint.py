from typing import Any, Dict, List, Optional, Tuple
from logging import Logger, basicConfig, getLogger, INFO
from dataclasses import dataclass, field
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

from src.model.transformer import ModelParams, build_model
from src.trainer.optimizer import AdamW
from src.model.config import ModelConfig

MAGIC: str = "MOVELAB-CHECKPOINT 1"
END_MARKER: str = "END"
STORAGE_DTYPES: Dict[str, str] = {"float64": "<f8", "float32": "<f4"}


class CheckpointError(Exception):
    """
    Exception raised when a checkpoint is malformed or does not fit the target model.
    """

    pass


@dataclass
class TensorEntry:
    name: str
    shape: Tuple[int, ...]
    dtype: str
    offset: int
    nbytes: int

    def render(self) -> str:
        shape = ",".join(str(s) for s in self.shape)
        return f"tensor={self.name}|{shape}|{self.dtype}|{self.offset}|{self.nbytes}"


@dataclass
class Checkpoint:
    """Parsed checkpoint: metadata, config values and arrays (float64) by name."""

    config: Dict[str, Any]
    step: int
    tensors: Dict[str, np.ndarray]
    meta: Dict[str, Any] = field(default_factory=dict)

    def optimizer_arrays(self) -> Dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if k[:2] in ("m.", "v.")}


def _parse_entry(line: str) -> TensorEntry:
    try:
        name, shape, dtype, offset, nbytes = line.split("|")
        dims = tuple(int(s) for s in shape.split(",")) if shape else ()
        return TensorEntry(name, dims, dtype, int(offset), int(nbytes))
    except ValueError as e:
        raise CheckpointError(f"malformed tensor entry '{line}'") from e


def checkpoint_save(
    target: Path,
    params: ModelParams,
    optimizer: Optional[AdamW] = None,
    step: int = 0,
    dtype: str = "float64",
    meta: Optional[Dict[str, Any]] = None,
) -> Path:
    """
    Writes a text manifest followed by raw little-endian arrays in manifest order.
    Args:
        target: Output file.
        params: Model to save.
        optimizer: Optional AdamW whose moments are stored after the model tensors.
        step: Completed optimizer steps.
        dtype: Storage encoding, ``float64`` (bit-exact) or ``float32``.
        meta: Extra scalar metadata stored as ``meta.<key>``.
    Returns:
        The written path.
    """
    if dtype not in STORAGE_DTYPES:
        raise CheckpointError(f"unsupported storage dtype '{dtype}'")
    arrays: List[Tuple[str, np.ndarray]] = [
        (name, tensor.data) for name, tensor in params.named_parameters()
    ]
    if optimizer is not None:
        arrays.extend(optimizer.state_arrays().items())

    lines: List[str] = [MAGIC, f"step={int(step)}"]
    lines.extend(f"config.{k}={dumps(v)}" for k, v in params.config.to_mapping().items())
    lines.extend(f"meta.{k}={dumps(v)}" for k, v in sorted((meta or {}).items()))
    if optimizer is not None:
        lines.append(f"optim.step={optimizer.step_count}")

    payload: List[bytes] = []
    offset = 0
    for name, array in arrays:
        raw = np.ascontiguousarray(array, dtype=STORAGE_DTYPES[dtype]).tobytes()
        lines.append(TensorEntry(name, array.shape, dtype, offset, len(raw)).render())
        payload.append(raw)
        offset += len(raw)
    lines.append(END_MARKER)

    try:
        target = Path(target)
        target.parent.mkdir(parents=True, exist_ok=True)
        with open(target, "wb") as f:
            f.write(("\n".join(lines) + "\n").encode("utf-8"))
            for raw in payload:
                f.write(raw)
        logger.info(f"Checkpoint saved: {target} ({len(arrays)} tensors, step {step})")
        return target
    except OSError as e:
        logger.error(f"Error writing checkpoint {target}: {e}")
        raise


def read_checkpoint(source: Path) -> Checkpoint:
    """
    Parses and validates a checkpoint file without touching any model.
    Raises:
        CheckpointError: On a missing file, bad header, truncated payload or
            inconsistent tensor entries.
    """
    source = Path(source)
    if not source.exists():
        raise CheckpointError(f"checkpoint not found: {source}")
    blob = source.read_bytes()
    marker = f"\n{END_MARKER}\n".encode("utf-8")
    cut = blob.find(marker)
    if not blob.startswith(MAGIC.encode("utf-8")) or cut < 0:
        raise CheckpointError(f"{source} is not a checkpoint (bad header or no END)")
    header = blob[:cut].decode("utf-8").split("\n")
    body = blob[cut + len(marker) :]

    config: Dict[str, Any] = {}
    meta: Dict[str, Any] = {}
    entries: List[TensorEntry] = []
    step = 0
    for line in header[1:]:
        key, _, value = line.partition("=")
        if key == "tensor":
            entries.append(_parse_entry(value))
        elif key == "step":
            step = int(value)
        elif key.startswith("config."):
            config[key[len("config.") :]] = loads(value)
        elif key.startswith("meta."):
            meta[key[len("meta.") :]] = loads(value)
        elif key == "optim.step":
            meta["optim.step"] = int(value)
        else:
            raise CheckpointError(f"unknown manifest line '{line}'")

    expected = sum(e.nbytes for e in entries)
    if len(body) != expected:
        raise CheckpointError(
            f"{source}: payload holds {len(body)} bytes, manifest lists {expected}"
        )
    tensors: Dict[str, np.ndarray] = {}
    for entry in entries:
        if entry.dtype not in STORAGE_DTYPES:
            raise CheckpointError(f"tensor {entry.name}: unsupported dtype {entry.dtype}")
        dtype = np.dtype(STORAGE_DTYPES[entry.dtype])
        if entry.nbytes != int(np.prod(entry.shape)) * dtype.itemsize:
            raise CheckpointError(
                f"tensor {entry.name}: {entry.nbytes} bytes do not fit shape {entry.shape}"
            )
        if entry.offset + entry.nbytes > len(body):
            raise CheckpointError(f"tensor {entry.name} runs past the end of the file")
        chunk = body[entry.offset : entry.offset + entry.nbytes]
        tensors[entry.name] = (
            np.frombuffer(chunk, dtype=dtype).reshape(entry.shape).astype(np.float64)
        )
    return Checkpoint(config, step, tensors, meta)


def checkpoint_load(
    source: Path, params: ModelParams, optimizer: Optional[AdamW] = None
) -> Checkpoint:
    """
    Restores parameters (and optimizer moments) from ``source``. Every name and
    shape is checked before the first assignment, so a rejected checkpoint leaves
    the model untouched.
    Raises:
        CheckpointError: On any mismatch with ``params`` or ``optimizer``.
    """
    checkpoint = read_checkpoint(source)
    named = params.named_parameters()
    missing = [name for name, _ in named if name not in checkpoint.tensors]
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors: {missing}")
    for name, tensor in named:
        stored = checkpoint.tensors[name].shape
        if stored != tensor.shape:
            raise CheckpointError(
                f"tensor {name}: checkpoint shape {stored} != model shape {tensor.shape}"
            )
    moments = checkpoint.optimizer_arrays()
    if optimizer is not None:
        if "optim.step" not in checkpoint.meta:
            raise CheckpointError("checkpoint carries no optimizer state")
        for name, tensor in named:
            for key in (f"m.{name}", f"v.{name}"):
                if key not in moments or moments[key].shape != tensor.shape:
                    raise CheckpointError(f"optimizer moment {key} missing or misshapen")

    for name, tensor in named:
        tensor.assign(checkpoint.tensors[name])
    if optimizer is not None:
        optimizer.load_state(checkpoint.meta["optim.step"], moments)
    params.refresh_fusions()
    logger.info(f"Checkpoint loaded: {source} (step {checkpoint.step})")
    return checkpoint


def load_model(source: Path) -> Tuple[ModelParams, Checkpoint]:
    """Rebuilds the model described by a checkpoint's config and loads its weights."""
    checkpoint = read_checkpoint(source)
    params = build_model(ModelConfig.from_mapping(checkpoint.config))
    checkpoint_load(source, params)
    return params, checkpoint
