from typing import Dict, Iterable, List, Literal, Optional, Tuple, Union
from logging import Logger, basicConfig, getLogger, INFO
from dataclasses import dataclass, field
from pandas import DataFrame
from pathlib import Path
from sys import path
import numpy as np

basicConfig(
    level=INFO, format="%(asctime)s - %(levelname)s - %(funcName)s - %(message)s"
)
logger: Logger = getLogger(__name__)

root_path = Path(__file__).parent.parent.parent
path.append(str(root_path))

from src.numerics.tensor import (
    Tensor,
    add,
    cross_entropy,
    gather_rows,
    gelu,
    matmul,
    mul,
    parameter,
    reduce_sum,
    rms_norm,
    seeded_normal,
)
from src.attention.mha import (
    AttentionParams,
    GateTensor,
    LaVEParams,
    LayerMemory,
    MoVELayer,
    Router,
    ValueBank,
    check_tokens,
    mha_forward,
)
from src.mla.latent_attention import LatentBank, LatentKV, MLAParams, mla_decode_step, mla_forward
from src.attention.kv_cache import KVCache, LayerKV, decode_step
from src.attention.rotary import RotaryTable
from src.model.config import ModelConfig

DecodeMode = Literal["greedy", "temperature"]


class SequenceLengthError(ValueError):
    """
    Exception raised when a sequence exceeds the model's context length.
    """

    pass


@dataclass
class Block:
    """One pre-norm residual block: attention (MHA or MLA), optional memory, FFN."""

    index: int
    norm_attn: Tensor
    attention: Union[AttentionParams, MLAParams]
    memory: LayerMemory
    norm_ffn: Tensor
    w_up: Tensor
    w_down: Tensor


@dataclass
class ModelParams:
    """
    Concrete network for a ModelConfig. ``bank`` is the single global table shared
    by every MoVE layer (None for other variants); LaVE banks live in the blocks.
    """

    config: ModelConfig
    embed: Tensor
    blocks: List[Block]
    norm_final: Tensor
    head: Tensor
    bank: Optional[ValueBank] = None
    pos_embed: Optional[Tensor] = None
    rotary: Optional[RotaryTable] = field(default=None, repr=False)

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        """Every trainable tensor once, in a stable order."""
        named: List[Tuple[str, Tensor]] = [("embed", self.embed)]
        if self.pos_embed is not None:
            named.append(("pos_embed", self.pos_embed))
        if self.bank is not None:
            named.append(("bank", self.bank.table))
        for block in self.blocks:
            named.extend((t.name, t) for t in _block_tensors(block))
        named.append(("norm_final", self.norm_final))
        named.append(("head", self.head))
        return named

    def parameters(self) -> List[Tensor]:
        return [tensor for _, tensor in self.named_parameters()]

    def refresh_fusions(self) -> None:
        """Recomputes every cached W_UV W_O product; call after each parameter update."""
        for block in self.blocks:
            if isinstance(block.attention, MLAParams):
                block.attention.refresh_fusion()


@dataclass
class ForwardResult:
    logits: Tensor
    gates: List[Optional[GateTensor]]


@dataclass
class LossResult:
    total: Tensor
    per_token: np.ndarray
    count: int


@dataclass
class ParameterAudit:
    """Per-tensor sizes with the memory contributions broken out."""

    sizes: Dict[str, int]
    bank: int
    router: int
    layer_banks: int
    layer_routers: int

    @property
    def total(self) -> int:
        return sum(self.sizes.values())

    @property
    def backbone(self) -> int:
        return self.total - self.bank - self.router - self.layer_banks - self.layer_routers

    def to_frame(self) -> DataFrame:
        return DataFrame(
            {"tensor": list(self.sizes), "size": list(self.sizes.values())}
        )


def _block_tensors(block: Block) -> List[Tensor]:
    tensors = [block.norm_attn, *block.attention.tensors()]
    if isinstance(block.memory, MoVELayer):
        tensors.append(block.memory.router.weight)
    elif isinstance(block.memory, LaVEParams):
        tensors.extend([block.memory.bank, block.memory.router])
    tensors.extend([block.norm_ffn, block.w_up, block.w_down])
    return tensors


def is_decay_exempt(name: str) -> bool:
    """Banks, routers and norm gains take no weight decay."""
    return "bank" in name or "router" in name or "norm" in name


def _normal(config: ModelConfig, name: str, shape: Tuple[int, ...]) -> Tensor:
    return parameter(seeded_normal(config.seed, name, shape, config.init_std), name=name)


def _zeros(name: str, shape: Tuple[int, ...]) -> Tensor:
    return parameter(np.zeros(shape), name=name)


def _ones(name: str, width: int) -> Tensor:
    return parameter(np.ones(width), name=name)


def _attention(config: ModelConfig, prefix: str) -> Union[AttentionParams, MLAParams]:
    d, heads, head_dim = config.d_model, config.n_heads, config.head_dim
    width = heads * head_dim
    if not config.is_mla:
        return AttentionParams(
            w_q=_normal(config, f"{prefix}.w_q", (d, width)),
            w_k=_normal(config, f"{prefix}.w_k", (d, width)),
            w_v=_normal(config, f"{prefix}.w_v", (d, width)),
            w_o=_normal(config, f"{prefix}.w_o", (width, d)),
            n_heads=heads,
            head_dim=head_dim,
        )
    d_c = config.resolved_latent_dim
    return MLAParams(
        w_q=_normal(config, f"{prefix}.w_q", (d, width)),
        w_dkv=_normal(config, f"{prefix}.w_dkv", (d, d_c)),
        w_uk=_normal(config, f"{prefix}.w_uk", (d_c, width)),
        w_uv=_normal(config, f"{prefix}.w_uv", (d_c, width)),
        w_o=_normal(config, f"{prefix}.w_o", (width, d)),
        n_heads=heads,
        head_dim=head_dim,
        n_chunks=config.resolved_latent_chunks,
        key_source=config.mla_key_source,
    )


def _memory_heads(config: ModelConfig) -> Tuple[int, int]:
    """(gated heads, per-head width) of the value stream the memory mixes into."""
    if config.is_mla:
        chunks = config.resolved_latent_chunks
        return chunks, config.resolved_latent_dim // chunks
    return config.n_heads, config.head_dim


def _global_bank(config: ModelConfig) -> Optional[ValueBank]:
    if config.memory_kind != "move":
        return None
    heads, width = _memory_heads(config)
    table = _zeros("bank", (config.vocab_size, config.n_slots, heads * width))
    kind = LatentBank if config.is_mla else ValueBank
    return kind(table, heads, width)


def _layer_memory(
    config: ModelConfig, index: int, bank: Optional[ValueBank]
) -> LayerMemory:
    heads, width = _memory_heads(config)
    prefix = f"blocks.{index}"
    if bank is not None:
        router_width = config.n_slots + 1 if config.gate_standard else config.n_slots
        router = Router(
            _zeros(f"{prefix}.router", (config.d_model, heads * router_width)),
            heads,
            config.n_slots,
            config.gate_standard,
        )
        return MoVELayer(bank, router)
    if index in config.lave_layers:
        columns = heads * (2 if config.gate_standard else 1)
        return LaVEParams(
            layer=index,
            bank=_zeros(f"{prefix}.lave.bank", (config.vocab_size, heads * width)),
            router=_zeros(f"{prefix}.lave.router", (config.d_model, columns)),
            n_heads=heads,
            head_dim=width,
            gate_standard=config.gate_standard,
            schedule=config.lave_layers,
        )
    return None


def build_model(config: ModelConfig) -> ModelParams:
    """
    Initializes a network deterministically from ``config.seed``. Backbone tensors
    draw from per-name streams, so variants sharing a seed share their backbone;
    banks and routers start at zero.
    """
    d, hidden = config.d_model, config.ffn_mult * config.d_model
    bank = _global_bank(config)
    blocks: List[Block] = []
    for index in range(config.n_layers):
        prefix = f"blocks.{index}"
        blocks.append(
            Block(
                index=index,
                norm_attn=_ones(f"{prefix}.norm_attn", d),
                attention=_attention(config, f"{prefix}.attn"),
                memory=_layer_memory(config, index, bank),
                norm_ffn=_ones(f"{prefix}.norm_ffn", d),
                w_up=_normal(config, f"{prefix}.ffn.w_up", (d, hidden)),
                w_down=_normal(config, f"{prefix}.ffn.w_down", (hidden, d)),
            )
        )
    params = ModelParams(
        config=config,
        embed=_normal(config, "embed", (config.vocab_size, d)),
        blocks=blocks,
        norm_final=_ones("norm_final", d),
        head=_normal(config, "head", (d, config.vocab_size)),
        bank=bank,
    )
    if config.is_mla:
        params.pos_embed = _normal(config, "pos_embed", (config.max_seq_len, d))
        params.refresh_fusions()
    else:
        params.rotary = RotaryTable(config.head_dim, config.max_seq_len, config.rope_base)

    audit = parameter_audit(params)
    logger.info(
        f"Built {config.label}: {audit.total} parameters "
        f"(bank {audit.bank}, routers {audit.router + audit.layer_routers}, "
        f"layer banks {audit.layer_banks})"
    )
    return params


def parameter_audit(params: ModelParams) -> ParameterAudit:
    sizes = {name: tensor.size for name, tensor in params.named_parameters()}
    return ParameterAudit(
        sizes=sizes,
        bank=sizes.get("bank", 0),
        router=sum(
            v
            for k, v in sizes.items()
            if k.endswith(".router") and not k.endswith(".lave.router")
        ),
        layer_banks=sum(v for k, v in sizes.items() if k.endswith(".lave.bank")),
        layer_routers=sum(v for k, v in sizes.items() if k.endswith(".lave.router")),
    )


def _check_sequence(params: ModelParams, tokens: np.ndarray) -> np.ndarray:
    tokens = check_tokens(tokens, params.config.vocab_size)
    if tokens.ndim not in (1, 2):
        raise ValueError(f"tokens must be (T,) or (B, T), got shape {tokens.shape}")
    if tokens.shape[-1] > params.config.max_seq_len:
        raise SequenceLengthError(
            f"sequence of {tokens.shape[-1]} tokens exceeds max_seq_len "
            f"{params.config.max_seq_len}"
        )
    return tokens


def _ffn(block: Block, x: Tensor, eps: float) -> Tensor:
    hidden = gelu(matmul(rms_norm(x, block.norm_ffn, eps), block.w_up))
    return matmul(hidden, block.w_down)


def forward_logits(
    params: ModelParams,
    tokens: np.ndarray,
    capture: bool = False,
    bank_layers: Optional[Iterable[int]] = None,
) -> ForwardResult:
    """
    Causal next-token logits for a token sequence.
    Args:
        params: The network.
        tokens: (T,) or (B, T) indices.
        capture: Collect each layer's GateTensor (None for memory-free layers).
        bank_layers: Layers whose MoVE bank term is active; None enables all.
    Returns:
        ForwardResult with logits (..., T, N_vocab).
    Raises:
        TokenRangeError: For indices outside the vocabulary.
        SequenceLengthError: When T exceeds max_seq_len.
    """
    config = params.config
    tokens = _check_sequence(params, tokens)
    enabled = None if bank_layers is None else set(bank_layers)

    x = gather_rows(params.embed, tokens)
    if params.pos_embed is not None:
        x = add(x, gather_rows(params.pos_embed, np.arange(tokens.shape[-1])))

    gates: List[Optional[GateTensor]] = []
    for block in params.blocks:
        h = rms_norm(x, block.norm_attn, config.norm_eps)
        bank_on = enabled is None or block.index in enabled
        if isinstance(block.attention, MLAParams):
            attended = mla_forward(
                h, block.attention, tokens, block.memory, capture, bank_on
            )
        else:
            attended = mha_forward(
                h, block.attention, tokens, block.memory, params.rotary, capture, bank_on
            )
        gates.append(attended.gates)
        x = add(x, attended.output)
        x = add(x, _ffn(block, x, config.norm_eps))

    logits = matmul(rms_norm(x, params.norm_final, config.norm_eps), params.head)
    return ForwardResult(logits, gates)


def ar_loss(
    logits: Tensor, targets: np.ndarray, mask: Optional[np.ndarray] = None
) -> LossResult:
    """
    Summed next-token negative log-likelihood in nats.
    Args:
        logits: (..., T, N_vocab).
        targets: (..., T) next tokens.
        mask: Optional 0/1 weights selecting which positions count.
    """
    per_position = cross_entropy(logits, targets)
    count = int(np.prod(per_position.shape))
    if mask is not None:
        mask = np.asarray(mask, dtype=np.float64)
        per_position = mul(per_position, mask)
        count = int(mask.sum())
    return LossResult(reduce_sum(per_position), per_position.numpy(), count)


def new_cache(params: ModelParams) -> KVCache:
    layers: List[object] = []
    for block in params.blocks:
        if isinstance(block.attention, MLAParams):
            raw = block.attention.key_source == "raw"
            layers.append(LatentKV(block.attention.latent_dim, keep_raw=raw))
        else:
            layers.append(LayerKV(block.attention.n_heads, block.attention.head_dim))
    return KVCache(layers)


def decode_next(
    params: ModelParams, cache: KVCache, token: int, capture: bool = False
) -> Tuple[np.ndarray, List[Optional[GateTensor]]]:
    """
    Feeds one token at position ``cache.position`` and returns its next-token logits
    (N_vocab,). Every layer cache grows by one entry.
    """
    config = params.config
    position = cache.position
    if position >= config.max_seq_len:
        raise SequenceLengthError(
            f"position {position} is beyond max_seq_len {config.max_seq_len}"
        )
    check_tokens(np.array([token]), config.vocab_size)

    x = gather_rows(params.embed, np.array([token]))
    if params.pos_embed is not None:
        x = add(x, gather_rows(params.pos_embed, np.array([position])))

    gates: List[Optional[GateTensor]] = []
    for block, layer_cache in zip(params.blocks, cache.layers):
        h = rms_norm(x, block.norm_attn, config.norm_eps)
        if isinstance(block.attention, MLAParams):
            out, gate = mla_decode_step(
                layer_cache, h, token, position, block.attention, block.memory, capture
            )
        else:
            out, gate = decode_step(
                layer_cache,
                h,
                token,
                position,
                block.attention,
                block.memory,
                params.rotary,
                capture,
            )
        gates.append(gate)
        x = add(x, out)
        x = add(x, _ffn(block, x, config.norm_eps))

    logits = matmul(rms_norm(x, params.norm_final, config.norm_eps), params.head)
    return logits.numpy()[0], gates


def _choose(
    logits: np.ndarray, mode: DecodeMode, temperature: float, rng: np.random.Generator
) -> int:
    if mode == "greedy" or temperature <= 0.0:
        return int(np.argmax(logits))
    scaled = logits / temperature
    probs = np.exp(scaled - scaled.max())
    probs /= probs.sum()
    return int(rng.choice(probs.shape[0], p=probs))


def generate(
    params: ModelParams,
    prompt: Iterable[int],
    steps: int,
    mode: DecodeMode = "greedy",
    temperature: float = 1.0,
    seed: int = 0,
) -> np.ndarray:
    """
    Autoregressive continuation through the KV cache.
    Args:
        params: The network.
        prompt: Non-empty token prefix.
        steps: Number of tokens to append; 0 returns the prompt.
        mode: ``greedy`` (argmax) or ``temperature`` (seeded sampling).
        temperature: Softmax temperature for sampling; 0 falls back to argmax.
        seed: Sampling seed.
    Returns:
        Prompt followed by the generated tokens.
    """
    tokens = [int(t) for t in prompt]
    if not tokens:
        raise ValueError("generate needs a non-empty prompt")
    if mode not in ("greedy", "temperature"):
        raise ValueError(f"unknown decode mode '{mode}'")
    if steps <= 0:
        return np.array(tokens, dtype=np.int64)
    if len(tokens) + steps - 1 > params.config.max_seq_len:
        raise SequenceLengthError(
            f"prompt of {len(tokens)} plus {steps} steps exceeds max_seq_len "
            f"{params.config.max_seq_len}"
        )

    rng = np.random.default_rng(seed)
    cache = new_cache(params)
    for token in tokens[:-1]:
        decode_next(params, cache, token)
    logits, _ = decode_next(params, cache, tokens[-1])
    for step in range(steps):
        chosen = _choose(logits, mode, temperature, rng)
        tokens.append(chosen)
        if step + 1 < steps:
            logits, _ = decode_next(params, cache, chosen)
    logger.debug(f"Generated {steps} tokens in {mode} mode")
    return np.array(tokens, dtype=np.int64)
