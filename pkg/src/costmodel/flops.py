from logging import Logger, basicConfig, getLogger, INFO
from typing import Dict, List, Optional, Tuple
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from sys import path
import numpy as np

basicConfig(
    level=INFO, format="%(asctime)s - %(levelname)s - %(funcName)s - %(message)s"
)
logger: Logger = getLogger(__name__)

root_path = Path(__file__).parent.parent.parent
path.append(str(root_path))

from src.numerics.tensor import MatmulCounter, MatmulRecord

FLOPS_PER_MULTIPLY_ADD: int = 2
EXCLUDED_COSTS: Tuple[str, ...] = (
    "normalization",
    "nonlinearities (softmax, sigmoid, GELU)",
    "embedding and bank gathers",
    "output head",
)
PROJECTION_SUFFIXES: Tuple[str, ...] = (
    ".attn.w_q",
    ".attn.w_k",
    ".attn.w_v",
    ".attn.w_o",
    ".attn.w_dkv",
    ".attn.w_uk",
    ".attn.w_uv",
)
FFN_SUFFIXES: Tuple[str, ...] = (".ffn.w_up", ".ffn.w_down")


@dataclass(frozen=True)
class StdCost:
    c_proj: int
    c_ffn: int
    c_sdpa: int

    @property
    def c_std(self) -> int:
        return self.c_proj + self.c_ffn + self.c_sdpa


@dataclass(frozen=True)
class FlopReport:
    """
    Per-token cost decomposition of one MoVE attention block.

    The ratio is kept twice: unreduced as H(M+1) over 12d + 2T, and in lowest terms.
    """

    d: int
    heads: int
    slots: int
    context: int
    c_proj: int
    c_ffn: int
    c_sdpa: int
    c_std: int
    c_move: int
    ratio: Fraction
    ratio_numerator: int
    ratio_denominator: int
    excluded: Tuple[str, ...] = EXCLUDED_COSTS

    @property
    def ratio_float(self) -> float:
        return float(self.ratio)

    @property
    def ratio_percent(self) -> float:
        return 100.0 * float(self.ratio)

    def records(self) -> Dict[str, str]:
        """Flat key-value form shared by the text and machine-readable outputs."""
        return {
            "d": str(self.d),
            "heads": str(self.heads),
            "slots": str(self.slots),
            "context": str(self.context),
            "c_proj": str(self.c_proj),
            "c_ffn": str(self.c_ffn),
            "c_sdpa": str(self.c_sdpa),
            "c_std": str(self.c_std),
            "c_move": str(self.c_move),
            "ratio": f"{self.ratio_numerator}/{self.ratio_denominator}",
            "ratio_reduced": f"{self.ratio.numerator}/{self.ratio.denominator}",
            "ratio_decimal": f"{self.ratio_float:.6f}",
            "ratio_percent": f"{self.ratio_percent:.2f}%",
            "excluded": ";".join(self.excluded),
        }

    def render(self) -> str:
        rows = [
            f"projections  C_proj = 8d^2      = {self.c_proj:,}",
            f"ffn          C_ffn  = 16d^2     = {self.c_ffn:,}",
            f"attention    C_sdpa = 4Td       = {self.c_sdpa:,}",
            f"standard     C_std              = {self.c_std:,}",
            f"router       C_move = 2dH(M+1)  = {self.c_move:,}",
            f"overhead     H(M+1)/(12d+2T)    = {self.ratio_numerator}/"
            f"{self.ratio_denominator} = {self.ratio.numerator}/{self.ratio.denominator}"
            f" = {self.ratio_float:.5f} ({self.ratio_percent:.2f}%)",
            f"excluded: {', '.join(self.excluded)}",
        ]
        return "\n".join(rows)


def flops_std(d: int, context: int) -> StdCost:
    """
    Standard per-token block cost in FLOPs (a multiply-add counts 2).
    Args:
        d: Model width.
        context: Sequence length T; 0 leaves only the dense terms.
    """
    if d < 1 or context < 0:
        raise ValueError(f"flops_std needs d >= 1 and T >= 0, got d={d}, T={context}")
    return StdCost(c_proj=8 * d * d, c_ffn=16 * d * d, c_sdpa=4 * context * d)


def flops_move(d: int, heads: int, slots: int) -> int:
    """Router cost 2dH(M+1); M = 0 leaves the standard-path gate alone."""
    if slots < 0:
        raise ValueError(f"slot count must be non-negative, got {slots}")
    return 2 * d * heads * (slots + 1)


def overhead_ratio(d: int, heads: int, slots: int, context: int) -> Tuple[Fraction, float]:
    """H(M+1) / (12d + 2T) in lowest terms and as a float."""
    denominator = 12 * d + 2 * context
    if denominator <= 0:
        raise ValueError(f"overhead ratio denominator must be positive, got {denominator}")
    ratio = Fraction(heads * (slots + 1), denominator)
    return ratio, float(ratio)


def bank_params(vocab_size: int, slots: int, width: int) -> int:
    """N_vocab * M * d (or d_c for latent banks)."""
    if min(vocab_size, slots, width) < 0:
        raise ValueError("bank dimensions must be non-negative")
    return vocab_size * slots * width


def flop_report(d: int, heads: int, slots: int, context: int) -> FlopReport:
    std = flops_std(d, context)
    c_move = flops_move(d, heads, slots)
    ratio, _ = overhead_ratio(d, heads, slots, context)
    if ratio * std.c_std != c_move:
        raise ArithmeticError("overhead ratio does not reproduce C_move / C_std")
    return FlopReport(
        d=d,
        heads=heads,
        slots=slots,
        context=context,
        c_proj=std.c_proj,
        c_ffn=std.c_ffn,
        c_sdpa=std.c_sdpa,
        c_std=std.c_std,
        c_move=c_move,
        ratio=ratio,
        ratio_numerator=heads * (slots + 1),
        ratio_denominator=12 * d + 2 * context,
    )


def classify(record: MatmulRecord) -> str:
    """Maps one recorded matmul to projections, ffn, router, excluded or sdpa."""
    names = [name for name in record.operands if name]
    if not names:
        return "sdpa"
    name = names[0]
    if name.endswith(PROJECTION_SUFFIXES):
        return "projections"
    if name.endswith(FFN_SUFFIXES):
        return "ffn"
    if name.endswith("router"):
        return "router"
    return "excluded"


@dataclass
class MeasuredCost:
    """Multiply-adds counted during a forward pass, grouped by ``classify``."""

    multiply_adds: Dict[str, int] = field(default_factory=dict)
    tokens: int = 1

    def flops_per_token(self, group: str) -> float:
        return FLOPS_PER_MULTIPLY_ADD * self.multiply_adds.get(group, 0) / self.tokens


def measure(records: List[MatmulRecord], tokens: int) -> MeasuredCost:
    totals: Dict[str, int] = {}
    for record in records:
        group = classify(record)
        totals[group] = totals.get(group, 0) + record.multiply_adds
    return MeasuredCost(totals, tokens)


def measure_forward(forward, tokens: np.ndarray, n_layers: Optional[int] = None) -> MeasuredCost:
    """
    Runs ``forward(tokens)`` under a MatmulCounter and groups its matmuls.
    Args:
        forward: Callable taking the token array.
        tokens: Input tokens; their count normalizes the result.
        n_layers: When given, results are per layer as well as per token.
    """
    with MatmulCounter() as counter:
        forward(tokens)
    cost = measure(counter.records, int(np.asarray(tokens).size) * (n_layers or 1))
    logger.info(f"Measured multiply-adds: {cost.multiply_adds}")
    return cost
