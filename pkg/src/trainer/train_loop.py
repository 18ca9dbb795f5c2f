from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple
from logging import Logger, basicConfig, getLogger, INFO
from dataclasses import asdict, dataclass, field
from pandas import DataFrame, concat
from time import perf_counter
from pathlib import Path
from sys import path
from math import isfinite
import numpy as np

basicConfig(
    level=INFO, format="%(asctime)s - %(levelname)s - %(funcName)s - %(message)s"
)
logger: Logger = getLogger(__name__)

root_path = Path(__file__).parent.parent.parent
path.append(str(root_path))

from src.trainer.optimizer import AdamW, clip_global_norm, cosine_lr
from src.model.checkpoint import checkpoint_load, checkpoint_save
from src.model.transformer import (
    ModelParams,
    ar_loss,
    build_model,
    forward_logits,
    is_decay_exempt,
    parameter_audit,
)
from src.data.stream import Batch, TaskData, training_batches
from src.model.metrics import EvalReport, bits_per_byte
from src.numerics.tensor import Tape, backward, mul
from src.utils.ledger_store import LedgerStore
from src.config.settings import CHECKPOINT_NAME, SUMMARY_NAME
from src.trainer.config import TrainConfig
from src.model.config import ModelConfig

COMPARED_FIELDS: Tuple[str, ...] = (
    "n_layers",
    "d_model",
    "n_heads",
    "vocab_size",
    "max_seq_len",
    "seed",
)
DETERMINISTIC_COLUMNS: List[str] = ["step", "train_loss", "eval_loss", "bpb", "lr", "grad_norm"]


class NonFiniteLossError(Exception):
    """
    Exception raised when a training loss or gradient norm is NaN or infinite.
    """

    pass


class ComparisonMismatchError(ValueError):
    """
    Exception raised when the runs of a comparison do not share their backbone setup.
    """

    pass


@dataclass
class LedgerRecord:
    step: int
    train_loss: float
    eval_loss: float
    bpb: float
    lr: float
    grad_norm: float
    wall_time: float


@dataclass
class RunLedger:
    """
    Evaluation points of one run plus its final parameter audit.

    Attributes:
        label (str): Variant label.
        records (List[LedgerRecord]): One entry per eval point, steps increasing.
        audit (Dict[str, int]): Total, bank and router parameter counts.
    """

    label: str
    records: List[LedgerRecord] = field(default_factory=list)
    audit: Dict[str, int] = field(default_factory=dict)

    def append(self, record: LedgerRecord) -> None:
        if self.records and record.step <= self.records[-1].step:
            raise ValueError(
                f"ledger steps must increase: {record.step} after {self.records[-1].step}"
            )
        self.records.append(record)

    @property
    def final(self) -> Optional[LedgerRecord]:
        return self.records[-1] if self.records else None

    def to_frame(self) -> DataFrame:
        columns = list(LedgerRecord.__dataclass_fields__)
        frame = DataFrame([asdict(r) for r in self.records], columns=columns)
        frame.insert(0, "label", self.label)
        return frame

    def deterministic_frame(self) -> DataFrame:
        """Ledger without wall-clock time; equal for equal (config, seed)."""
        return self.to_frame()[DETERMINISTIC_COLUMNS].reset_index(drop=True)

    def write_jsonl(self, directory: Path) -> Path:
        target = Path(directory) / f"ledger_{slug(self.label)}.jsonl"
        target.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_json(target, orient="records", lines=True)
        logger.info(f"Ledger written: {target}")
        return target


@dataclass
class StepResult:
    loss: float
    grad_norm: float
    lr: float


@dataclass
class ExperimentResult:
    ledgers: Dict[str, RunLedger]
    summary: DataFrame
    baseline: str


def slug(label: str) -> str:
    return label.replace("+", "-").replace(" ", "_")


def make_optimizer(params: ModelParams, train: TrainConfig) -> AdamW:
    return AdamW(
        params.named_parameters(),
        beta1=train.beta1,
        beta2=train.beta2,
        eps=train.eps,
        weight_decay=train.weight_decay,
        decay_filter=lambda name: not is_decay_exempt(name),
    )


def train_step(
    params: ModelParams,
    optimizer: AdamW,
    batch: Batch,
    lr: float,
    clip_norm: float,
    mask: Optional[np.ndarray] = None,
) -> StepResult:
    """
    Mean next-token loss, backward pass, global-norm clipping and one AdamW update.
    Fused MLA matrices are refreshed after the update.
    Raises:
        NonFiniteLossError: Before any parameter changes if the loss or the
            gradient norm is not finite.
    """
    with Tape() as tape:
        result = forward_logits(params, batch.inputs)
        loss = ar_loss(result.logits, batch.targets, mask)
        mean_loss = mul(loss.total, 1.0 / max(loss.count, 1))
    value = mean_loss.item()
    if not isfinite(value):
        logger.error(f"Non-finite loss {value} at batch {batch.index}")
        raise NonFiniteLossError(f"loss is {value} at batch {batch.index}")

    named = params.named_parameters()
    grads = backward(mean_loss, tape, leaves=[t for _, t in named])
    by_name = {name: grads[tensor] for name, tensor in named}
    clipped, norm = clip_global_norm(by_name, clip_norm)
    if not isfinite(norm):
        logger.error(f"Non-finite gradient norm at batch {batch.index}")
        raise NonFiniteLossError(f"gradient norm is {norm} at batch {batch.index}")
    optimizer.step(clipped, lr)
    params.refresh_fusions()
    return StepResult(value, norm, lr)


def evaluate(
    params: ModelParams,
    data: TaskData,
    batch_size: int = 16,
    max_windows: Optional[int] = None,
    label: str = "",
) -> EvalReport:
    """
    Summed loss over the held-out windows (masked targets only, when a mask is set).
    Bytes are scaled from ``data.eval_bytes`` to the targets actually scored.
    """
    inputs, targets, mask = data.eval_inputs, data.eval_targets, data.eval_mask
    if max_windows is not None:
        inputs, targets = inputs[:max_windows], targets[:max_windows]
        mask = None if mask is None else mask[:max_windows]
    scorable = data.eval_targets.size if data.eval_mask is None else data.eval_mask.sum()

    total, count = 0.0, 0
    for start in range(0, inputs.shape[0], batch_size):
        stop = start + batch_size
        chunk_mask = None if mask is None else mask[start:stop]
        logits = forward_logits(params, inputs[start:stop]).logits
        loss = ar_loss(logits, targets[start:stop], chunk_mask)
        total += loss.total.item()
        count += loss.count
    byte_count = int(round(count * data.eval_bytes / scorable))
    return bits_per_byte(total, count, byte_count, label or params.config.label)


def _ledger_from_meta(label: str, meta: Dict[str, Any]) -> RunLedger:
    ledger = RunLedger(label)
    for record in meta.get("ledger", []):
        ledger.append(LedgerRecord(**record))
    return ledger


def train_run(
    params: ModelParams,
    train: TrainConfig,
    data: TaskData,
    label: Optional[str] = None,
    output_dir: Optional[Path] = None,
    resume_from: Optional[Path] = None,
) -> RunLedger:
    """
    Trains ``params`` in place for ``train.steps`` steps.
    Args:
        params: Freshly built (or checkpoint-compatible) model.
        train: Budget and recipe.
        data: Training stream and eval windows.
        label: Ledger label; defaults to the config label.
        output_dir: Where checkpoints go; None disables checkpointing.
        resume_from: Checkpoint to continue from. The batch sequence continues
            where it stopped, so the result equals an uninterrupted run.
    Returns:
        RunLedger with one record per eval point.
    """
    label = label or params.config.label
    train.check_model(params.config)
    optimizer = make_optimizer(params, train)
    ledger = RunLedger(label)
    start = 0
    if resume_from is not None:
        checkpoint = checkpoint_load(resume_from, params, optimizer)
        start = checkpoint.step
        ledger = _ledger_from_meta(label, checkpoint.meta)
        logger.info(f"Resuming {label} at step {start}")

    checkpoint_path = None if output_dir is None else Path(output_dir) / slug(label)
    clock = perf_counter()
    batches = training_batches(
        data.train_tokens, train.seq_len, train.batch_size, train.seed, train.steps, start
    )
    for batch in batches:
        step = batch.index
        lr = cosine_lr(
            step, train.steps, train.learning_rate, train.warmup_ratio, train.min_lr_ratio
        )
        result = train_step(params, optimizer, batch, lr, train.clip_norm)
        done = step + 1

        if done % train.eval_interval == 0 or done == train.steps:
            report = evaluate(params, data, train.batch_size, train.eval_batches, label)
            ledger.append(
                LedgerRecord(
                    step=done,
                    train_loss=result.loss,
                    eval_loss=report.loss_per_token,
                    bpb=report.bpb,
                    lr=lr,
                    grad_norm=result.grad_norm,
                    wall_time=perf_counter() - clock,
                )
            )
            logger.info(
                f"[{label}] step {done}/{train.steps} train {result.loss:.4f} "
                f"eval {report.loss_per_token:.4f} bpb {report.bpb:.4f}"
            )

        interval = train.checkpoint_interval
        if checkpoint_path is not None and (
            done == train.steps or (interval and done % interval == 0)
        ):
            checkpoint_save(
                checkpoint_path / CHECKPOINT_NAME,
                params,
                optimizer,
                done,
                meta={"ledger": [asdict(r) for r in ledger.records], "label": label},
            )

    audit = parameter_audit(params)
    ledger.audit = {
        "parameters": audit.total,
        "bank_parameters": audit.bank + audit.layer_banks,
        "router_parameters": audit.router + audit.layer_routers,
    }
    return ledger


def check_comparison(configs: Sequence[ModelConfig], data: TaskData) -> None:
    """
    Raises:
        ComparisonMismatchError: If the configs differ outside variant/scale/std
            path/MLA fields, disagree with the data vocabulary, or repeat a label.
    """
    if not configs:
        raise ComparisonMismatchError("a comparison needs at least one config")
    reference = configs[0]
    for config in configs[1:]:
        differing = [
            name for name in COMPARED_FIELDS if getattr(config, name) != getattr(reference, name)
        ]
        if differing:
            raise ComparisonMismatchError(
                f"{config.label} differs from {reference.label} in {differing}"
            )
    if reference.vocab_size != data.vocab_size:
        raise ComparisonMismatchError(
            f"model vocabulary {reference.vocab_size} != data vocabulary {data.vocab_size}"
        )
    labels = [c.label for c in configs]
    if len(set(labels)) != len(labels):
        raise ComparisonMismatchError(f"duplicate variant labels in {labels}")


def summarize(ledgers: Dict[str, RunLedger], baseline: str) -> DataFrame:
    """Final eval loss/BPB per run and gains as baseline minus variant."""
    base = ledgers[baseline].final
    rows: List[Dict[str, Any]] = []
    for label, ledger in ledgers.items():
        final = ledger.final
        rows.append(
            {
                "label": label,
                "final_eval_loss": final.eval_loss,
                "final_bpb": final.bpb,
                "loss_gain": base.eval_loss - final.eval_loss,
                "bpb_gain": base.bpb - final.bpb,
                **ledger.audit,
            }
        )
    return DataFrame(rows)


def run_experiment(
    configs: Sequence[ModelConfig],
    train: TrainConfig,
    data: TaskData,
    output_dir: Optional[Path] = None,
    baseline: Optional[str] = None,
) -> ExperimentResult:
    """
    Trains every config on the identical batch sequence and compares them.
    Args:
        configs: Variants sharing d, L, H, vocabulary, context and seed.
        train: Shared budget.
        data: Shared task.
        output_dir: Receives ledger_<label>.jsonl, summary.txt and checkpoints.
        baseline: Label the gains are measured against; defaults to the first config.
    """
    check_comparison(configs, data)
    baseline = baseline or configs[0].label
    if baseline not in {c.label for c in configs}:
        raise ComparisonMismatchError(f"baseline '{baseline}' is not among the configs")

    ledgers: Dict[str, RunLedger] = {}
    for index, config in enumerate(configs, start=1):
        logger.info(f"Run {index}/{len(configs)}: {config.label}")
        params = build_model(config)
        ledgers[config.label] = train_run(params, train, data, config.label, output_dir)

    summary = summarize(ledgers, baseline)
    if output_dir is not None:
        for ledger in ledgers.values():
            ledger.write_jsonl(output_dir)
        target = Path(output_dir) / SUMMARY_NAME
        target.write_text(summary.to_string(index=False) + "\n", encoding="utf-8")
        logger.info(f"Summary written: {target}")
    return ExperimentResult(ledgers, summary, baseline)


def run_sweep(
    configs: Sequence[ModelConfig],
    train: TrainConfig,
    data: TaskData,
    seeds: Iterable[int],
    sweep: str,
    output_dir: Optional[Path] = None,
    store: Optional[LedgerStore] = None,
    baseline: Optional[str] = None,
) -> DataFrame:
    """
    Repeats ``run_experiment`` per seed (model init and batch order both reseeded)
    and returns the median final eval loss/BPB per variant.
    """
    summaries: List[DataFrame] = []
    for seed in seeds:
        seeded = [c.derive(seed=seed) for c in configs]
        seed_dir = None if output_dir is None else Path(output_dir) / f"seed_{seed}"
        result = run_experiment(seeded, train.derive(seed=seed), data, seed_dir, baseline)
        summary = result.summary.assign(sweep=sweep, seed=seed)
        summaries.append(summary)
        if store is not None:
            ledger_rows = concat(
                [ledger.to_frame() for ledger in result.ledgers.values()], ignore_index=True
            ).assign(sweep=sweep, seed=seed)
            store.insert_ledger(ledger_rows)
            store.insert_summary(summary)

    combined = concat(summaries, ignore_index=True)
    medians = (
        combined.groupby("label", sort=False)
        .agg(
            seeds=("seed", "nunique"),
            median_eval_loss=("final_eval_loss", "median"),
            median_bpb=("final_bpb", "median"),
        )
        .reset_index()
    )
    if output_dir is not None:
        target = Path(output_dir) / SUMMARY_NAME
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(medians.to_string(index=False) + "\n", encoding="utf-8")
    logger.info(f"Sweep '{sweep}' medians:\n{medians}")
    return medians
