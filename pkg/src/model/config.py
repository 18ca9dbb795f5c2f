from pydantic import BaseModel, ConfigDict, ValidationError, model_validator
from typing import Any, Dict, FrozenSet, Literal, Mapping, Optional
from logging import Logger, basicConfig, getLogger, INFO

basicConfig(
    level=INFO, format="%(asctime)s - %(levelname)s - %(funcName)s - %(message)s"
)
logger: Logger = getLogger(__name__)

Variant = Literal["standard", "lave", "move", "mla", "mla+lave", "mla+move"]
StdPath = Literal["ungated", "gated"]
KeySource = Literal["augmented", "raw"]

MEMORY_VARIANTS: FrozenSet[str] = frozenset({"lave", "move", "mla+lave", "mla+move"})
MOVE_VARIANTS: FrozenSet[str] = frozenset({"move", "mla+move"})
LAVE_VARIANTS: FrozenSet[str] = frozenset({"lave", "mla+lave"})
MLA_VARIANTS: FrozenSet[str] = frozenset({"mla", "mla+lave", "mla+move"})
MOVE_SCALES: FrozenSet[int] = frozenset({1, 2, 4, 8, 16, 32})
LAVE_SCALES: FrozenSet[int] = frozenset({1, 2})
DEFAULT_COMPRESSION: int = 32


class ConfigError(ValueError):
    """
    Exception raised when a model or run configuration is inconsistent.
    """

    pass


class ModelConfig(BaseModel):
    """
    Architecture hyperparameters of one network.

    Attributes:
        n_layers (int): L.
        d_model (int): d; must equal n_heads * head_dim.
        n_heads (int): H.
        vocab_size (int): N_vocab.
        max_seq_len (int): T_max.
        variant (str): standard, lave, move, mla, mla+lave or mla+move.
        scale (int | None): Scaling label; M = scale * L / 2 for MoVE, and
            the LaVE layer set (x1 every other layer, x2 all layers).
        std_path (str | None): Standard-path gating; None picks the variant default
            (gated for MoVE, ungated for LaVE).
        latent_dim (int | None): d_c for MLA variants; None means d / 32, rounded up
            to a whole number of chunks.
        latent_chunks (int | None): H_kv; None means H.
        mla_key_source (str): Keys from the augmented or the raw latent.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    n_layers: int
    d_model: int
    n_heads: int
    vocab_size: int
    max_seq_len: int
    variant: Variant = "standard"
    scale: Optional[int] = None
    std_path: Optional[StdPath] = None
    latent_dim: Optional[int] = None
    latent_chunks: Optional[int] = None
    mla_key_source: KeySource = "augmented"
    seed: int = 0
    init_std: float = 0.02
    ffn_mult: int = 4
    norm_eps: float = 1e-6
    rope_base: float = 10000.0

    @model_validator(mode="after")
    def _check(self) -> "ModelConfig":
        for label in ("n_layers", "d_model", "n_heads", "vocab_size", "max_seq_len"):
            if getattr(self, label) < 1:
                raise ValueError(f"{label} must be positive, got {getattr(self, label)}")
        if self.d_model % self.n_heads:
            raise ValueError(
                f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}"
            )
        if not self.is_mla and self.head_dim % 2:
            raise ValueError(f"rotary positions need an even head_dim, got {self.head_dim}")

        if self.variant in MEMORY_VARIANTS:
            allowed = MOVE_SCALES if self.variant in MOVE_VARIANTS else LAVE_SCALES
            if self.scale not in allowed:
                raise ValueError(
                    f"variant {self.variant} needs scale in {sorted(allowed)}, got {self.scale}"
                )
            if self.variant in MOVE_VARIANTS and (self.scale * self.n_layers) % 2:
                raise ValueError(
                    f"scale x{self.scale} with {self.n_layers} layers gives a "
                    f"fractional slot count"
                )
        elif self.scale is not None or self.std_path is not None:
            raise ValueError(f"variant {self.variant} takes no scale or std_path")

        if self.is_mla:
            d_c, chunks = self.resolved_latent_dim, self.resolved_latent_chunks
            if d_c < 1 or d_c > self.d_model:
                raise ValueError(f"latent_dim {d_c} must lie in [1, {self.d_model}]")
            if d_c % chunks:
                raise ValueError(f"latent_dim {d_c} is not divisible by {chunks} chunks")
            if d_c == self.d_model:
                logger.warning(f"latent_dim equals d_model ({d_c}): no KV compression")
        elif self.latent_dim is not None or self.latent_chunks is not None:
            raise ValueError(f"variant {self.variant} takes no latent dimensions")
        return self

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any]) -> "ModelConfig":
        """
        Builds a config from plain values, turning validation failures into ConfigError.
        Raises:
            ConfigError: With pydantic's explanation of every failing field.
        """
        try:
            return cls(**dict(values))
        except ValidationError as e:
            logger.error(f"Invalid model configuration: {e}")
            raise ConfigError(f"invalid model configuration: {e}") from e

    def derive(self, **changes: Any) -> "ModelConfig":
        """Copy with some fields replaced, validated again."""
        return ModelConfig.from_mapping({**self.model_dump(), **changes})

    def to_mapping(self) -> Dict[str, Any]:
        return self.model_dump()

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def is_mla(self) -> bool:
        return self.variant in MLA_VARIANTS

    @property
    def memory_kind(self) -> Optional[str]:
        if self.variant in MOVE_VARIANTS:
            return "move"
        if self.variant in LAVE_VARIANTS:
            return "lave"
        return None

    @property
    def n_slots(self) -> int:
        """M; zero for memory-free and LaVE variants."""
        if self.memory_kind != "move":
            return 0
        return self.scale * self.n_layers // 2

    @property
    def gate_standard(self) -> bool:
        if self.std_path is not None:
            return self.std_path == "gated"
        return self.memory_kind == "move"

    @property
    def lave_layers(self) -> FrozenSet[int]:
        """x1: {L-1, L-3, ...}; x2: every layer."""
        if self.memory_kind != "lave":
            return frozenset()
        if self.scale == 2:
            return frozenset(range(self.n_layers))
        return frozenset(range(self.n_layers - 1, -1, -2))

    @property
    def resolved_latent_dim(self) -> int:
        """Explicit ``latent_dim``, else d/32 rounded up to a whole number of chunks."""
        if self.latent_dim is not None:
            return self.latent_dim
        chunks = self.resolved_latent_chunks
        blocks = max(1, -(-(self.d_model // DEFAULT_COMPRESSION) // chunks))
        return min(blocks * chunks, self.d_model)

    @property
    def resolved_latent_chunks(self) -> int:
        return self.latent_chunks if self.latent_chunks is not None else self.n_heads

    @property
    def label(self) -> str:
        """Short name such as ``move x4`` or ``lave x1 gated``."""
        parts = [self.variant]
        if self.scale is not None:
            parts.append(f"x{self.scale}")
        if self.std_path is not None:
            parts.append(self.std_path)
        return " ".join(parts)
