"""Forward-pass FLOPs per token for dense, MoE and stratified MoE models.

Each variant is priced as the dense backbone plus the extra expert FFN passes
its MoE blocks add.  For stratified blocks the number of gate rounds a token
takes is modelled under uniform routing, where the top-1 expert of gate ``i`` is
uniform over its ``E_i`` visible experts.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .experts import StratumLayout, parse_layout

ARCHS = {
    # name: (d_model, d_ff, dense FLOPs/token reported for the dense backbone)
    "base": (512, 2048, 167e6),
    "big": (1024, 4096, 506e6),
}
N_MOE_BLOCKS = 6

# reported FLOPs/token columns, keyed by variant name
REFERENCE = {
    "base": {"dense": 167e6, "vanilla": 192e6, "switch": 167e6, "4-4": 217e6,
             "2-2-2-2": 247e6, "stacked2": 242e6, "stacked4": 327e6},
    "big": {"dense": 506e6, "vanilla": 606e6, "switch": 506e6, "4-12": 656e6,
            "12-4": 757e6, "8-8": 707e6, "4-4-8": 724e6, "8-4-4": 805e6,
            "4-4-4-4": 825e6},
}


@dataclass(frozen=True)
class FlopsBudget:
    dense_flops_per_token: float
    ffn_flops: float
    n_moe_blocks: int
    expected_hops: float
    k: int

    @property
    def total(self) -> float:
        return self.dense_flops_per_token + self.n_moe_blocks * (self.k * self.expected_hops - 1) * self.ffn_flops


def ffn_flops(d_model: int, d_ff: int) -> float:
    # two matmuls, 2 FLOPs per multiply-accumulate
    return 2.0 * (2.0 * d_model * d_ff)


def expected_hops(layout: StratumLayout) -> float:
    """Mean gate rounds per token under uniform top-1 routing."""
    sizes = layout.sizes
    L = len(sizes)
    h = [0.0] * (L + 2)
    h[L] = 1.0
    for i in range(L - 1, 0, -1):
        E_i = sum(sizes[i - 1:])
        h[i] = 1.0 + sum(sizes[j - 1] / E_i * h[j + 1] for j in range(i, L))
    return h[1]


def expected_hops_enumerated(layout: StratumLayout) -> Fraction:
    """Exact expectation by summing over every path of visited gates."""
    sizes = layout.sizes
    L = len(sizes)
    total = Fraction(0)
    # a path visits gate 1, then gates g_2 < g_3 < ... chosen from 2..L, and ends
    # when the last gate's top-1 lands in stratum L
    for n_extra in range(L):
        for extra in itertools.combinations(range(2, L + 1), n_extra):
            gates = (1,) + extra
            p = Fraction(1)
            for a, b in zip(gates, gates[1:]):
                # from gate a, landing in stratum b-1 sends the token to gate b
                p *= Fraction(sizes[b - 2], sum(sizes[a - 1:]))
            last = gates[-1]
            p *= Fraction(sizes[L - 1], sum(sizes[last - 1:]))
            total += p * len(gates)
    return total


def _parse_variant(variant: str) -> tuple[str, object]:
    v = variant.strip().lower()
    if v in ("dense", "vanilla", "switch"):
        return v, None
    if v.startswith("stacked"):
        m = int(v[len("stacked"):] or 2)
        if m < 1:
            raise ValueError(f"bad stacked variant {variant!r}")
        return "stacked", m
    try:
        return "smoe", parse_layout(v)
    except ValueError:
        raise ValueError(f"unknown variant {variant!r}") from None


def budget(variant: str, d_model: int, d_ff: int, dense_flops: float,
           n_blocks: int = N_MOE_BLOCKS) -> FlopsBudget:
    kind, arg = _parse_variant(variant)
    f = ffn_flops(d_model, d_ff)
    if kind == "dense":
        # k*h - 1 = 0: no extra passes over the dense FFN
        return FlopsBudget(dense_flops, f, 0, 1.0, 1)
    if kind == "switch":
        return FlopsBudget(dense_flops, f, n_blocks, 1.0, 1)
    if kind == "vanilla":
        return FlopsBudget(dense_flops, f, n_blocks, 1.0, 2)
    if kind == "stacked":
        return FlopsBudget(dense_flops, f, n_blocks, float(arg), 2)
    return FlopsBudget(dense_flops, f, n_blocks, expected_hops(arg), 2)


def flops_per_token(variant: str, arch: str = "base", *, d_model: int | None = None,
                    d_ff: int | None = None, dense_flops: float | None = None,
                    n_blocks: int = N_MOE_BLOCKS) -> float:
    if arch not in ARCHS:
        raise ValueError(f"unknown arch preset {arch!r}")
    dm, dff, dense = ARCHS[arch]
    return budget(variant, d_model or dm, d_ff or dff,
                  dense if dense_flops is None else dense_flops, n_blocks).total


def measured_ffn_passes(outputs) -> float:
    """Mean non-dropped expert evaluations per token per block over BlockOutputs."""
    evals = [np.asarray(o.expert_evals) for o in outputs]
    if not evals:
        raise ValueError("no block outputs")
    return float(np.concatenate(evals).mean())


def flops_table(arch: str, variants: list[str]) -> list[dict]:
    if arch not in ARCHS:
        raise ValueError(f"unknown arch preset {arch!r}")
    rows = []
    for v in variants:
        computed = flops_per_token(v, arch)
        ref = REFERENCE[arch].get(v.strip().lower())
        dev = None if ref is None else 100.0 * (computed - ref) / ref
        rows.append({"variant": v, "computed": computed, "reference": ref, "deviation_pct": dev})
    return rows
