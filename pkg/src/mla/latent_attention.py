from typing import List, Literal, Optional, Tuple, Union
from logging import Logger, basicConfig, getLogger, INFO
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

from src.numerics.tensor import (
    ShapeError,
    Tensor,
    matmul,
    mul,
    reduce_sum,
    reshape,
    softmax_lastdim,
    swapaxes,
    transpose,
)
from src.attention.mha import (
    AttentionOutput,
    GateTensor,
    LaVEParams,
    MoVELayer,
    ValueBank,
    apply_memory,
    attention_weights,
    merge_heads,
    split_heads,
)
from src.attention.kv_cache import CachePositionError

KeySource = Literal["augmented", "raw"]


class StaleFusionError(Exception):
    """
    Exception raised when the fused W_UV W_O matrix predates a parameter update.
    """

    pass


class LatentBank(ValueBank):
    """
    Shared latent slot table of shape (N_vocab, M, d_c), each slot viewed as
    H_kv chunks of width d_c / H_kv.
    """

    @property
    def n_chunks(self) -> int:
        return self.n_heads

    @property
    def chunk_width(self) -> int:
        return self.head_dim


@dataclass
class FusedProjection:
    """
    Per-head products W_UV^(h) W_O^(h), shape (H, d_c, d), tagged with the
    versions of the two source tensors at fusion time.
    """

    matrix: Tensor
    w_uv: Tensor
    w_o: Tensor
    versions: Tuple[int, int]

    def is_stale(self) -> bool:
        return self.versions != (self.w_uv.version, self.w_o.version)


@dataclass
class MLAParams:
    """
    Multi-head latent attention projections of one layer.

    Attributes:
        w_q: d x H*d_h query projection.
        w_dkv: d x d_c down-projection to the latent.
        w_uk, w_uv: d_c x H*d_h key/value up-projections.
        w_o: H*d_h x d output projection.
        n_chunks: H_kv latent chunks used for memory gating.
        key_source: Keys from the augmented latent c_S or the raw latent c.
        fused: Cached W_UV W_O for inference; refreshed after every update.
    """

    w_q: Tensor
    w_dkv: Tensor
    w_uk: Tensor
    w_uv: Tensor
    w_o: Tensor
    n_heads: int
    head_dim: int
    n_chunks: int
    key_source: KeySource = "augmented"
    fused: Optional[FusedProjection] = field(default=None, repr=False)

    def __post_init__(self) -> None:
        d, d_c = self.w_dkv.shape
        width = self.n_heads * self.head_dim
        if d_c > d:
            raise ShapeError(f"latent width {d_c} exceeds model width {d}")
        if d_c % self.n_chunks:
            raise ShapeError(f"latent width {d_c} not divisible by {self.n_chunks} chunks")
        for label, tensor, expected in (
            ("w_q", self.w_q, (d, width)),
            ("w_uk", self.w_uk, (d_c, width)),
            ("w_uv", self.w_uv, (d_c, width)),
            ("w_o", self.w_o, (width, d)),
        ):
            if tensor.shape != expected:
                raise ShapeError(f"{label}: expected {expected}, got {tensor.shape}")

    @property
    def d_model(self) -> int:
        return self.w_dkv.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.w_dkv.shape[1]

    @property
    def chunk_width(self) -> int:
        return self.latent_dim // self.n_chunks

    @property
    def compression_ratio(self) -> float:
        return self.latent_dim / self.d_model

    def tensors(self) -> List[Tensor]:
        return [self.w_q, self.w_dkv, self.w_uk, self.w_uv, self.w_o]

    def refresh_fusion(self) -> FusedProjection:
        """Recomputes the cached fused matrix outside any tape."""
        self.fused = FusedProjection(
            Tensor(fuse_value_output(self).matrix.data),
            self.w_uv,
            self.w_o,
            (self.w_uv.version, self.w_o.version),
        )
        return self.fused


LatentMemory = Union[MoVELayer, LaVEParams, None]


def compress_latent(x: Tensor, w_dkv: Tensor) -> Tensor:
    """c = X W_DKV."""
    return matmul(x, w_dkv)


def _chunks(c: Tensor, n_chunks: int) -> Tensor:
    return reshape(c, c.shape[:-1] + (n_chunks, c.shape[-1] // n_chunks))


def inject_latent_memory(
    c: Tensor,
    x: Tensor,
    tokens: Optional[np.ndarray],
    memory: LatentMemory,
    n_chunks: int,
    capture: bool = False,
    bank_enabled: bool = True,
) -> Tuple[Tensor, Optional[GateTensor]]:
    """
    Chunk-wise memory mixing of the latent:
    c_S^(h) = g_0^(h) c^(h) + sum_i g_i^(h) M_i^(h), chunks concatenated back.
    Args:
        c: Raw latent (..., T, d_c).
        x: The hidden state the latent was compressed from (router input).
        tokens: Token indices (..., T).
        memory: MoVELayer over a LatentBank, LaVEParams at width d_c, or None.
        n_chunks: H_kv.
    Returns:
        (c_S, gates or None). With no memory c_S is c itself.
    """
    if memory is None:
        return c, None
    if c.shape[-1] % n_chunks:
        raise ShapeError(f"latent {c.shape} not divisible into {n_chunks} chunks")
    chunked = _chunks(c, n_chunks)
    mixed, gates = apply_memory(x, chunked, tokens, memory, capture, bank_enabled)
    if mixed is chunked:
        return c, gates
    return reshape(mixed, c.shape), gates


def fuse_value_output(params: MLAParams) -> FusedProjection:
    """W_UV^(h) W_O^(h) for every head, (H, d_c, d); recorded on the tape if active."""
    heads, head_dim, d_c = params.n_heads, params.head_dim, params.latent_dim
    w_uv = transpose(reshape(params.w_uv, (d_c, heads, head_dim)), (1, 0, 2))
    w_o = reshape(params.w_o, (heads, head_dim, params.d_model))
    return FusedProjection(
        matmul(w_uv, w_o), params.w_uv, params.w_o, (params.w_uv.version, params.w_o.version)
    )


def absorbed_output(c_s: Tensor, weights: Tensor, fused: FusedProjection) -> Tensor:
    """
    Output sum_h (A^(h) c_S) (W_UV^(h) W_O^(h)); the (T, H*d_h) value tensor is
    never formed.
    Args:
        c_s: Cached latent (..., T_k, d_c).
        weights: Attention weights (..., H, T_q, T_k).
        fused: Fused projection matching the current parameters.
    Raises:
        StaleFusionError: If W_UV or W_O changed after fusion.
    """
    if fused.is_stale():
        raise StaleFusionError(
            f"fused projection built at versions {fused.versions}, parameters now at "
            f"{(fused.w_uv.version, fused.w_o.version)}"
        )
    latent = reshape(c_s, c_s.shape[:-2] + (1,) + c_s.shape[-2:])
    context = matmul(weights, latent)
    per_head = matmul(context, fused.matrix)
    return reduce_sum(per_head, axis=-3)


def materialized_output(c_s: Tensor, weights: Tensor, w_uv: Tensor, w_o: Tensor) -> Tensor:
    """Reference path: V = c_S W_UV materialized, then attention and W_O."""
    heads = weights.shape[-3]
    head_dim = w_uv.shape[1] // heads
    v = split_heads(c_s, w_uv, heads, head_dim)
    return matmul(merge_heads(weights, v), w_o)


def mla_forward(
    x: Tensor,
    params: MLAParams,
    tokens: Optional[np.ndarray] = None,
    memory: LatentMemory = None,
    capture: bool = False,
    bank_enabled: bool = True,
    fused: Optional[FusedProjection] = None,
) -> AttentionOutput:
    """
    Causal MLA over x (..., T, d). Keys come from c_S (or raw c, per
    ``params.key_source``) through W_UK; values reach the output via the absorbed
    path. Without ``fused`` the fusion is computed in this call, so gradients flow
    into W_UV and W_O.
    """
    if x.shape[-1] != params.d_model:
        raise ShapeError(f"mla_forward: input {x.shape} does not match d={params.d_model}")
    c = compress_latent(x, params.w_dkv)
    c_s, gates = inject_latent_memory(
        c, x, tokens, memory, params.n_chunks, capture, bank_enabled
    )
    key_latent = c_s if params.key_source == "augmented" else c
    q = split_heads(x, params.w_q, params.n_heads, params.head_dim)
    k = split_heads(key_latent, params.w_uk, params.n_heads, params.head_dim)
    weights = attention_weights(q, k)
    fusion = fuse_value_output(params) if fused is None else fused
    return AttentionOutput(absorbed_output(c_s, weights, fusion), gates)


@dataclass
class LatentKV:
    """
    Append-only latent cache of one MLA layer: c_S rows (t, d_c), plus raw c rows
    when keys are derived from the raw latent.
    """

    latent_dim: int
    keep_raw: bool = False
    latents: np.ndarray = field(default=None)
    raw: np.ndarray = field(default=None)

    def __post_init__(self) -> None:
        if self.latents is None:
            self.latents = np.zeros((0, self.latent_dim))
        if self.raw is None:
            self.raw = np.zeros((0, self.latent_dim))

    @property
    def length(self) -> int:
        return self.latents.shape[0]

    @property
    def floats_per_step(self) -> int:
        return self.latent_dim * (2 if self.keep_raw else 1)

    def append(self, c_s: np.ndarray, c: np.ndarray) -> None:
        if c_s.shape != (self.latent_dim,):
            raise ShapeError(f"latent append expects ({self.latent_dim},), got {c_s.shape}")
        self.latents = np.concatenate([self.latents, c_s[None, :].copy()], axis=0)
        if self.keep_raw:
            self.raw = np.concatenate([self.raw, c[None, :].copy()], axis=0)


def mla_decode_step(
    cache: LatentKV,
    x_t: Tensor,
    token: int,
    position: int,
    params: MLAParams,
    memory: LatentMemory = None,
    capture: bool = False,
) -> Tuple[Tensor, Optional[GateTensor]]:
    """
    One incremental MLA step: compress and inject the new position, cache c_S,
    rebuild keys from the cached latents and read values through the cached fusion.
    Raises:
        CachePositionError: If the cache length differs from ``position``.
        StaleFusionError: If the cached fusion predates a parameter update.
    """
    if cache.length != position:
        raise CachePositionError(
            f"latent cache holds {cache.length} positions but step is at {position}"
        )
    fused = params.fused if params.fused is not None else params.refresh_fusion()
    c = compress_latent(x_t, params.w_dkv)
    c_s, gates = inject_latent_memory(
        c, x_t, np.array([token]), memory, params.n_chunks, capture
    )
    cache.append(c_s.numpy()[0], c.numpy()[0])

    key_rows = cache.latents if params.key_source == "augmented" else cache.raw
    q = split_heads(x_t, params.w_q, params.n_heads, params.head_dim)
    k = split_heads(Tensor(key_rows), params.w_uk, params.n_heads, params.head_dim)
    scores = matmul(swapaxes(q, -3, -2), swapaxes(swapaxes(k, -3, -2), -1, -2))
    weights = softmax_lastdim(mul(scores, 1.0 / np.sqrt(params.head_dim)))
    return absorbed_output(Tensor(cache.latents), weights, fused), gates
