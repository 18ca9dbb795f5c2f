from typing import FrozenSet, List, Optional, Sequence, Tuple, Union
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

from src.numerics.tensor import (
    IndexRangeError,
    ShapeError,
    Tensor,
    add,
    gather_rows,
    masked_fill,
    matmul,
    mul,
    reduce_sum,
    reshape,
    sigmoid,
    softmax_lastdim,
    swapaxes,
)
from src.attention.rotary import RotaryTable


class TokenRangeError(IndexRangeError):
    """
    Exception raised when a token index is not below the vocabulary size.
    """

    pass


class LayerSelectionError(ValueError):
    """
    Exception raised when layer-local memory is used on a layer outside its schedule.
    """

    pass


@dataclass
class AttentionParams:
    """
    Per-layer multi-head projections. W_Q/W_K/W_V hold all heads side by side
    (d x H*d_h, head h in columns h*d_h:(h+1)*d_h); W_O maps H*d_h back to d.
    """

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    n_heads: int
    head_dim: int

    def __post_init__(self) -> None:
        width = self.n_heads * self.head_dim
        for label, tensor, expected in (
            ("w_q", self.w_q, (self.w_q.shape[0], width)),
            ("w_k", self.w_k, (self.w_q.shape[0], width)),
            ("w_v", self.w_v, (self.w_q.shape[0], width)),
            ("w_o", self.w_o, (width, self.w_q.shape[0])),
        ):
            if tensor.shape != expected:
                raise ShapeError(f"{label}: expected {expected}, got {tensor.shape}")

    @property
    def d_model(self) -> int:
        return self.w_q.shape[0]

    def tensors(self) -> List[Tensor]:
        return [self.w_q, self.w_k, self.w_v, self.w_o]


@dataclass
class ValueBank:
    """
    Slot table E of shape (N_vocab, M, H * d_h); each slot is viewed as H chunks of
    width d_h on retrieval.
    """

    table: Tensor
    n_heads: int
    head_dim: int

    def __post_init__(self) -> None:
        if self.table.ndim != 3 or self.table.shape[2] != self.n_heads * self.head_dim:
            raise ShapeError(
                f"bank table {self.table.shape} does not match "
                f"{self.n_heads} heads x {self.head_dim}"
            )

    @property
    def vocab_size(self) -> int:
        return self.table.shape[0]

    @property
    def n_slots(self) -> int:
        return self.table.shape[1]

    @property
    def param_count(self) -> int:
        return self.table.size


@dataclass
class Router:
    """
    Layer-local gate projection. With ``gate_standard`` the weight is d x H*(M+1),
    column h*(M+1) + i holding slot i of head h (slot 0 gates the standard path);
    without it the weight is d x H*M and the standard path keeps a unit gate.
    """

    weight: Tensor
    n_heads: int
    n_slots: int
    gate_standard: bool = True

    def __post_init__(self) -> None:
        if self.weight.shape[1] != self.n_heads * self.width:
            raise ShapeError(
                f"router weight {self.weight.shape} does not match "
                f"{self.n_heads} heads x {self.width} gates"
            )

    @property
    def width(self) -> int:
        return self.n_slots + 1 if self.gate_standard else self.n_slots


@dataclass
class MoVELayer:
    """A layer's view of the shared bank: its own router plus the global table."""

    bank: ValueBank
    router: Router


@dataclass
class LaVEParams:
    """
    Layer-local single-slot memory. ``bank`` is (N_vocab, H * d_h); ``router`` is
    d x H, or d x 2H when the standard path is gated (columns H:2H give g_0).
    ``schedule`` is the set of layers the model gives a LaVE bank; empty means
    just ``layer``.
    """

    layer: int
    bank: Tensor
    router: Tensor
    n_heads: int
    head_dim: int
    gate_standard: bool = False
    schedule: FrozenSet[int] = frozenset()

    def __post_init__(self) -> None:
        self.schedule = frozenset(self.schedule) or frozenset({self.layer})
        if self.bank.ndim != 2 or self.bank.shape[1] != self.n_heads * self.head_dim:
            raise ShapeError(f"LaVE bank {self.bank.shape} does not match heads")
        expected = self.n_heads * (2 if self.gate_standard else 1)
        if self.router.shape[1] != expected:
            raise ShapeError(
                f"LaVE router {self.router.shape} needs {expected} output columns"
            )


LayerMemory = Union[MoVELayer, LaVEParams, None]


@dataclass
class GateTensor:
    """
    Gate values copied out of a forward pass, shape (..., T, H, M+1); slot 0 is the
    standard-path gate (exactly 1.0 when that path is ungated).
    """

    values: np.ndarray

    @property
    def n_slots(self) -> int:
        return self.values.shape[-1] - 1

    @property
    def memory_slots(self) -> np.ndarray:
        return self.values[..., 1:]


@dataclass
class AttentionOutput:
    output: Tensor
    gates: Optional[GateTensor] = None


def scaled_gate(z: Tensor) -> Tensor:
    """g = 2 * sigmoid(z): in (0, 2), exactly 1 at z = 0."""
    return mul(sigmoid(z), 2.0)


def check_tokens(tokens: np.ndarray, vocab_size: int) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    bad = tokens[(tokens < 0) | (tokens >= vocab_size)]
    if bad.size:
        raise TokenRangeError(
            f"token {int(bad.reshape(-1)[0])} out of range for vocabulary of {vocab_size}"
        )
    return tokens


def retrieve_memory(bank: ValueBank, tokens: np.ndarray) -> Tensor:
    """
    Gathers E[w_t] and views it as (..., T, M, H, d_h). Gradients scatter into the
    rows of tokens that occur.
    Raises:
        TokenRangeError: For any index outside the bank.
    """
    tokens = check_tokens(tokens, bank.vocab_size)
    rows = gather_rows(bank.table, tokens)
    return reshape(rows, tokens.shape + (bank.n_slots, bank.n_heads, bank.head_dim))


def route(x: Tensor, router: Router) -> Tensor:
    """Router logits from the block input, gated to shape (..., T, H, width)."""
    z = matmul(x, router.weight)
    gates = scaled_gate(z)
    return reshape(gates, x.shape[:-1] + (router.n_heads, router.width))


def mix_values_move(
    v: Tensor, memory: Tensor, gates: Tensor, gate_standard: bool = True
) -> Tensor:
    """
    V_S[t,h] = g[t,h,0] * V[t,h] + sum_i g[t,h,i] * M[t,i,h].
    Args:
        v: Standard values (..., T, H, d_h).
        memory: Retrieved slots (..., T, M, H, d_h).
        gates: (..., T, H, M+1), or (..., T, H, M) when the standard path is ungated.
        gate_standard: Whether slot 0 of ``gates`` scales the standard values.
    Raises:
        ShapeError: When the three operands disagree.
    """
    lead, n_slots = v.shape[:-2], memory.shape[-3]
    width = n_slots + 1 if gate_standard else n_slots
    if (
        memory.shape[:-3] != lead
        or memory.shape[-2:] != v.shape[-2:]
        or gates.shape != v.shape[:-1] + (width,)
    ):
        raise ShapeError(
            f"mix_values_move: values {v.shape}, memory {memory.shape} and "
            f"gates {gates.shape} disagree"
        )
    if gate_standard:
        standard = mul(v, gates[..., 0:1])
        slot_gates = gates[..., 1:]
    else:
        standard = v
        slot_gates = gates
    by_head = swapaxes(memory, -3, -2)
    weighted = mul(by_head, reshape(slot_gates, slot_gates.shape + (1,)))
    return add(standard, reduce_sum(weighted, axis=-2))


def retrieve_layer_memory(lave: LaVEParams, tokens: np.ndarray) -> Tensor:
    """E_l[w_t] viewed as (..., T, H, d_h)."""
    tokens = check_tokens(tokens, lave.bank.shape[0])
    rows = gather_rows(lave.bank, tokens)
    return reshape(rows, tokens.shape + (lave.n_heads, lave.head_dim))


def route_layer(x: Tensor, lave: LaVEParams) -> Tuple[Tensor, Optional[Tensor]]:
    """Returns (memory gates, standard gates or None), each (..., T, H)."""
    gates = scaled_gate(matmul(x, lave.router))
    if not lave.gate_standard:
        return gates, None
    return gates[..., : lave.n_heads], gates[..., lave.n_heads :]


def mix_values_lave(
    v: Tensor,
    memory: Tensor,
    gates: Tensor,
    layer: int,
    selection: Sequence[int],
    standard_gates: Optional[Tensor] = None,
) -> Tensor:
    """
    Ungated standard path: V_S = V + g_l * M_l.
    Gated standard path: V_S = g_0 * V + g_l * M_l.
    Gates are per head, shape (..., T, H).
    Raises:
        LayerSelectionError: If ``layer`` is not in the LaVE schedule.
        ShapeError: When operands disagree.
    """
    if layer not in set(selection):
        raise LayerSelectionError(
            f"layer {layer} carries no LaVE bank (schedule {sorted(selection)})"
        )
    if memory.shape != v.shape or gates.shape != v.shape[:-1]:
        raise ShapeError(
            f"mix_values_lave: values {v.shape}, memory {memory.shape} and "
            f"gates {gates.shape} disagree"
        )
    memory_term = mul(memory, reshape(gates, gates.shape + (1,)))
    if standard_gates is None:
        return add(v, memory_term)
    return add(mul(v, reshape(standard_gates, standard_gates.shape + (1,))), memory_term)


def _capture(standard: Optional[Tensor], slot_values: np.ndarray) -> GateTensor:
    if standard is None:
        head = np.ones(slot_values.shape[:-1] + (1,))
    else:
        head = standard.numpy().reshape(slot_values.shape[:-1] + (1,))
    return GateTensor(np.concatenate([head, slot_values], axis=-1))


def apply_memory(
    x: Tensor,
    v: Tensor,
    tokens: Optional[np.ndarray],
    memory: LayerMemory,
    capture: bool = False,
    bank_enabled: bool = True,
) -> Tuple[Tensor, Optional[GateTensor]]:
    """
    Turns standard values (..., T, H, d_h) into V_S for whichever memory the layer
    carries. With ``bank_enabled`` False a MoVE layer keeps its router and g_0 but
    drops the retrieved slots.
    """
    if memory is None:
        return v, None
    if tokens is None:
        raise ValueError("token indices are required for memory retrieval")

    if isinstance(memory, MoVELayer):
        router = memory.router
        gates = route(x, router)
        if bank_enabled:
            slots = retrieve_memory(memory.bank, tokens)
            v_s = mix_values_move(v, slots, gates, router.gate_standard)
        elif router.gate_standard:
            v_s = mul(v, gates[..., 0:1])
        else:
            v_s = v
        gate_capture = None
        if capture:
            if router.gate_standard:
                gate_capture = GateTensor(gates.numpy())
            else:
                gate_capture = _capture(None, gates.numpy())
        return v_s, gate_capture

    slot_gates, standard_gates = route_layer(x, memory)
    layer_memory = retrieve_layer_memory(memory, tokens)
    v_s = mix_values_lave(
        v, layer_memory, slot_gates, memory.layer, memory.schedule, standard_gates
    )
    gate_capture = None
    if capture:
        gate_capture = _capture(standard_gates, slot_gates.numpy()[..., None])
    return v_s, gate_capture


def split_heads(x: Tensor, weight: Tensor, n_heads: int, head_dim: int) -> Tensor:
    """x @ weight viewed as (..., T, H, d_h)."""
    projected = matmul(x, weight)
    return reshape(projected, x.shape[:-1] + (n_heads, head_dim))


def causal_mask(length: int) -> np.ndarray:
    """True above the diagonal: key j is hidden from query t when j > t."""
    return np.triu(np.ones((length, length), dtype=bool), k=1)


def attention_weights(q: Tensor, k: Tensor) -> Tensor:
    """
    Causal softmax(Q K^T / sqrt(d_h)) per head.
    Args:
        q, k: (..., T, H, d_h).
    Returns:
        (..., H, T, T) weights.
    """
    head_dim, length = q.shape[-1], q.shape[-3]
    q_h = swapaxes(q, -3, -2)
    k_h = swapaxes(k, -3, -2)
    scores = mul(matmul(q_h, swapaxes(k_h, -1, -2)), 1.0 / np.sqrt(head_dim))
    scores = masked_fill(scores, causal_mask(length), -np.inf)
    return softmax_lastdim(scores)


def merge_heads(weights: Tensor, v: Tensor) -> Tensor:
    """Attention-weighted values (..., H, T, T) x (..., T, H, d_h) -> (..., T, H*d_h)."""
    y = matmul(weights, swapaxes(v, -3, -2))
    y = swapaxes(y, -3, -2)
    return reshape(y, y.shape[:-2] + (y.shape[-2] * y.shape[-1],))


def mha_forward(
    x: Tensor,
    params: AttentionParams,
    tokens: Optional[np.ndarray] = None,
    memory: LayerMemory = None,
    rotary: Optional[RotaryTable] = None,
    capture: bool = False,
    bank_enabled: bool = True,
) -> AttentionOutput:
    """
    Causal multi-head attention over x (..., T, d) with optional value memory.
    Args:
        x: Normalized block input; also the router input.
        params: Projections of this layer.
        tokens: Token indices (..., T), required when ``memory`` is set.
        memory: MoVELayer, LaVEParams or None for the standard layer.
        rotary: Rotary table for queries/keys, or None.
        capture: Return a copy of the gates used.
        bank_enabled: See ``apply_memory``.
    Returns:
        AttentionOutput with (..., T, d) output and optional GateTensor.
    """
    if x.shape[-1] != params.d_model:
        raise ShapeError(f"mha_forward: input {x.shape} does not match d={params.d_model}")
    q = split_heads(x, params.w_q, params.n_heads, params.head_dim)
    k = split_heads(x, params.w_k, params.n_heads, params.head_dim)
    v = split_heads(x, params.w_v, params.n_heads, params.head_dim)
    if rotary is not None:
        q = rotary.apply(q)
        k = rotary.apply(k)
    v_s, gates = apply_memory(x, v, tokens, memory, capture, bank_enabled)
    weights = attention_weights(q, k)
    out = matmul(merge_heads(weights, v_s), params.w_o)
    return AttentionOutput(out, gates)
