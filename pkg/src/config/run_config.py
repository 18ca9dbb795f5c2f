from typing import Any, Dict, List, Literal, Optional
from logging import Logger, basicConfig, getLogger, INFO
from pydantic import BaseModel, ConfigDict, ValidationError
from dataclasses import dataclass, field
from pathlib import Path
from sys import path

basicConfig(
    level=INFO, format="%(asctime)s - %(levelname)s - %(funcName)s - %(message)s"
)
logger: Logger = getLogger(__name__)

root_path = Path(__file__).parent.parent.parent
path.append(str(root_path))

from src.data.fact_corpus import FactTaskSpec, gen_fact_corpus, read_fact_corpus
from src.utils.config_loader import RunConfigLoader, section
from src.data.stream import TaskData, text_task
from src.model.config import MLA_VARIANTS, ConfigError, ModelConfig
from src.config.settings import PATH_ROOT, TOOL_VERSION
from src.trainer.config import TrainConfig


class DataOptions(BaseModel):
    """``DATA_*`` keys: a text file or a generated/stored fact corpus."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["facts", "text"] = "facts"
    path: Optional[Path] = None
    max_eval_windows: Optional[int] = None


class SweepOptions(BaseModel):
    """``SWEEP_*`` keys: variant specs ``variant[:scale[:std_path]]`` and seeds."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str = "sweep"
    variants: str = "standard"
    seeds: str = "0"
    baseline: Optional[str] = None

    def variant_list(self) -> List[Dict[str, Any]]:
        return [parse_variant(item) for item in self.variants.split(",") if item.strip()]

    def seed_list(self) -> List[int]:
        return [int(s) for s in self.seeds.split(",") if s.strip()]


class TraceOptions(BaseModel):
    """``TRACE_*`` keys."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    sentences: Optional[Path] = None
    target: Optional[str] = None
    tokenizer: Literal["bytes", "ids"] = "bytes"
    format: Literal["csv", "jsonl"] = "csv"


def parse_variant(item: str) -> Dict[str, Any]:
    """``move:4:gated`` -> {variant: move, scale: 4, std_path: gated}."""
    parts = [p.strip() for p in item.strip().split(":")]
    spec: Dict[str, Any] = {"variant": parts[0], "scale": None, "std_path": None}
    if len(parts) > 1 and parts[1]:
        spec["scale"] = int(parts[1].lstrip("x"))
    if len(parts) > 2 and parts[2]:
        spec["std_path"] = parts[2]
    if len(parts) > 3:
        raise ConfigError(f"variant spec '{item}' has too many fields")
    return spec


def _options(kind: type, values: Dict[str, str], prefix: str) -> Any:
    try:
        return kind(**section(values, prefix))
    except ValidationError as e:
        logger.error(f"Invalid {prefix}* options: {e}")
        raise ConfigError(f"invalid {prefix}* options: {e}") from e


@dataclass
class RunConfig:
    """
    Resolved run configuration: file values with overrides applied, split by prefix.
    ``values`` keeps the flat KEY=VALUE form that becomes the manifest.
    """

    values: Dict[str, str]
    data: DataOptions
    sweep: SweepOptions
    trace: TraceOptions
    model: Optional[ModelConfig] = None
    train: Optional[TrainConfig] = None
    fact_spec: Optional[FactTaskSpec] = field(default=None, repr=False)

    def manifest(self, subcommand: str) -> Dict[str, str]:
        return {**self.values, "TOOL_VERSION": TOOL_VERSION, "RUN_SUBCOMMAND": subcommand}

    def load_task(self) -> TaskData:
        """Builds the TaskData the config describes."""
        if self.data.kind == "text":
            if self.data.path is None:
                raise ConfigError("DATA_KIND=text needs DATA_PATH")
            seq_len = self.train.seq_len if self.train else self.model.max_seq_len
            return text_task(_rooted(self.data.path), seq_len, self.data.max_eval_windows)
        if self.data.path is not None:
            return read_fact_corpus(_rooted(self.data.path)).task()
        if self.fact_spec is None:
            raise ConfigError("fact task needs DATA_FACT_* keys or DATA_PATH")
        return gen_fact_corpus(self.fact_spec).task()

    def sweep_configs(self) -> List[ModelConfig]:
        """One model config per ``SWEEP_VARIANTS`` entry, derived from the MODEL_* keys."""
        if self.model is None:
            raise ConfigError("a sweep needs MODEL_* keys")
        configs: List[ModelConfig] = []
        for spec in self.sweep.variant_list():
            if spec["variant"] not in MLA_VARIANTS:
                spec = {**spec, "latent_dim": None, "latent_chunks": None}
            configs.append(self.model.derive(**spec))
        return configs


def _rooted(candidate: Path) -> Path:
    candidate = Path(candidate)
    return candidate if candidate.is_absolute() or candidate.exists() else PATH_ROOT / candidate


def resolve_values(values: Dict[str, str]) -> RunConfig:
    """
    Splits flat values into typed sections.
    Raises:
        ConfigError: When any section fails validation.
    """
    data_values = {k: v for k, v in values.items() if not k.startswith("DATA_FACT_")}
    fact_values = section(values, "DATA_FACT_")
    model_values = section(values, "MODEL_")
    train_values = section(values, "TRAIN_")
    run = RunConfig(
        values=dict(values),
        data=_options(DataOptions, data_values, "DATA_"),
        sweep=_options(SweepOptions, values, "SWEEP_"),
        trace=_options(TraceOptions, values, "TRACE_"),
        model=ModelConfig.from_mapping(model_values) if model_values else None,
        train=TrainConfig.from_mapping(train_values) if train_values else None,
    )
    if fact_values:
        try:
            run.fact_spec = FactTaskSpec(**fact_values)
        except ValidationError as e:
            raise ConfigError(f"invalid DATA_FACT_* options: {e}") from e
    if run.model is not None and run.train is not None:
        run.train.check_model(run.model)
    return run


def load_run_config(
    source: str, overrides: Optional[Dict[str, Any]] = None, loader: Optional[RunConfigLoader] = None
) -> RunConfig:
    """
    Reads a config file and applies overrides (flat KEY -> value, None ignored).
    Raises:
        ResourceNotFoundError: If the file does not exist.
        ConfigError: When the resolved values are invalid.
    """
    loader = loader or RunConfigLoader()
    values = loader.load(source)
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = str(value)
    return resolve_values(values)
