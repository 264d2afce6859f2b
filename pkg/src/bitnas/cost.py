"""Bit-weighted cost models, the log-power cost weighting, and cost reports.

Model size counts conv and fc weight bits (sum over layers of #PARAM times
weight-bit).  Compute counts MAC operations weighted by weight-bit times
act-bit.  BatchNorm parameters and biases are excluded; the fixed stem and
classifier enter both totals at 32 bits.  Compression is measured against
the all-32-bit baseline of the full (no-skip) network, so the unquantized
architecture compresses by exactly 1.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .engine import Tensor
from .supernet import (
    Architecture, BlockSpec, PrecisionCandidate, SuperNetSpec,
    SKIP_KIND, validate_architecture,
)

OBJECTIVES = ("model-size", "compute")

__all__ = [
    "CostConfig", "CostReport", "OBJECTIVES",
    "param_count", "flop_count", "block_cost_vectors",
    "expected_cost", "architecture_cost", "cost_report",
    "cost_weighting", "calibrate_beta", "total_loss",
]


@dataclass
class CostConfig:
    objective: str = "model-size"
    beta: float = 0.1
    gamma: float = 0.9
    auto_calibrate_beta: bool = True

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if self.beta <= 0 or self.gamma <= 0:
            raise ValueError("beta and gamma must be positive")


# --------------------------------------------------------------------------
# layer-level counts
# --------------------------------------------------------------------------

def param_count(cout: int, cin: int, kh: int, kw: int = None) -> int:
    """Weights of one conv (or linear, with kh=kw=1); biases excluded."""
    if kw is None:
        kw = kh
    return cout * cin * kh * kw


def flop_count(cout: int, cin: int, kh: int, kw: int,
               out_h: int, out_w: int) -> int:
    """Multiply-accumulate count of one conv at the given output size."""
    return cout * cin * kh * kw * out_h * out_w


def _block_convs(b: BlockSpec, in_size: Tuple[int, int]):
    """(cout, cin, k, out_h, out_w) for the two convs of a basic block."""
    h, w = in_size
    h1 = (h + 2 - 3) // b.stride + 1
    w1 = (w + 2 - 3) // b.stride + 1
    return [
        (b.out_channels, b.in_channels, 3, h1, w1),
        (b.out_channels, b.out_channels, 3, h1, w1),
    ]


def _candidate_cost(b: BlockSpec, cand: PrecisionCandidate, objective: str,
                    in_size: Tuple[int, int]) -> int:
    if cand.kind == SKIP_KIND:
        return 0
    w_bits, a_bits = cand.effective_bits()
    total = 0
    for cout, cin, k, oh, ow in _block_convs(b, in_size):
        if objective == "model-size":
            total += param_count(cout, cin, k) * w_bits
        else:
            total += flop_count(cout, cin, k, k, oh, ow) * w_bits * a_bits
    return total


def block_cost_vectors(spec: SuperNetSpec, objective: str) -> List[np.ndarray]:
    """Per block: the static cost of each candidate, aligned with its menu."""
    sizes = spec.block_input_sizes()
    return [
        np.array([_candidate_cost(b, c, objective, sz) for c in b.candidates],
                 dtype=np.float64)
        for b, sz in zip(spec.blocks, sizes)
    ]


def fixed_cost(spec: SuperNetSpec, objective: str) -> int:
    """Stem conv and classifier, always full precision."""
    cin, h, w = spec.input_shape
    stem = spec.stem_channels
    fc_in, fc_out = spec.final_channels, spec.num_classes
    if objective == "model-size":
        return (param_count(stem, cin, 3) + param_count(fc_out, fc_in, 1)) * 32
    stem_macs = flop_count(stem, cin, 3, 3, h, w)
    fc_macs = fc_in * fc_out
    return (stem_macs + fc_macs) * 32 * 32


def baseline_cost(spec: SuperNetSpec, objective: str) -> int:
    """The full network with every block at 32-bit weights and activations."""
    total = fixed_cost(spec, objective)
    sizes = spec.block_input_sizes()
    for b, sz in zip(spec.blocks, sizes):
        total += _candidate_cost(b, PrecisionCandidate.full(), objective, sz)
    return total


# --------------------------------------------------------------------------
# expected (soft) and exact (hard) architecture costs
# --------------------------------------------------------------------------

def expected_cost(spec: SuperNetSpec, masks: Sequence[Tensor],
                  config: CostConfig) -> Tensor:
    """Mask-weighted cost on the tape: fixed terms plus sum_k m_k * cost_k.

    Fixed full-precision layers contribute constants, so they shift the total
    without entering the theta-gradient.
    """
    if len(masks) != len(spec.blocks):
        raise ValueError(f"{len(masks)} masks for {len(spec.blocks)} blocks")
    vectors = block_cost_vectors(spec, config.objective)
    total: Tensor = None
    for m, v in zip(masks, vectors):
        term = (m * Tensor(v.astype(m.dtype))).sum()
        total = term if total is None else total + term
    return total + float(fixed_cost(spec, config.objective))


def architecture_cost(spec: SuperNetSpec, arch: Architecture,
                      config: CostConfig) -> int:
    """Exact integer cost of a hard architecture (fixed layers included)."""
    validate_architecture(spec, arch)
    sizes = spec.block_input_sizes()
    total = fixed_cost(spec, config.objective)
    for b, idx, sz in zip(spec.blocks, arch.choices, sizes):
        total += _candidate_cost(b, b.candidates[idx], config.objective, sz)
    return total


@dataclass
class CostReport:
    objective: str
    total: float
    fixed: float
    per_block: Dict[str, float]
    baseline: float
    compression: float

    def to_json(self) -> dict:
        return {
            "objective": self.objective,
            "total": self.total,
            "fixed": self.fixed,
            "per_block": dict(self.per_block),
            "baseline": self.baseline,
            "compression": self.compression,
        }

    @staticmethod
    def from_json(obj: dict) -> "CostReport":
        return CostReport(obj["objective"], obj["total"], obj["fixed"],
                          dict(obj["per_block"]), obj["baseline"],
                          obj["compression"])


def cost_report(spec: SuperNetSpec, arch: Architecture,
                config: CostConfig) -> CostReport:
    validate_architecture(spec, arch)
    sizes = spec.block_input_sizes()
    per_block = {
        b.id: float(_candidate_cost(b, b.candidates[idx], config.objective, sz))
        for b, idx, sz in zip(spec.blocks, arch.choices, sizes)
    }
    fixed = float(fixed_cost(spec, config.objective))
    total = fixed + sum(per_block.values())
    base = float(baseline_cost(spec, config.objective))
    return CostReport(config.objective, total, fixed, per_block, base,
                      base / total)


# --------------------------------------------------------------------------
# the loss coupling
# --------------------------------------------------------------------------

def cost_weighting(cost: Tensor, beta: float, gamma: float) -> Tensor:
    """beta * (ln cost)^gamma on the tape, via exp(gamma * ln(ln cost))."""
    if float(cost.data) <= 1.0:
        raise ValueError(f"cost must exceed 1, got {float(cost.data)}")
    return (cost.log().log() * gamma).exp() * beta


def calibrate_beta(initial_cost: float, gamma: float, target: float = 1.0) -> float:
    """Pick beta so the weighting equals ``target`` at the initial cost."""
    if initial_cost <= 1.0:
        raise ValueError("initial cost must exceed 1")
    return target / (np.log(initial_cost) ** gamma)


def total_loss(cross_entropy: Tensor, cost: Tensor, config: CostConfig) -> Tensor:
    """Multiplicative coupling: CE times the cost weighting."""
    return cross_entropy * cost_weighting(cost, config.beta, config.gamma)
