"""Expert FFNs and the stratum partition of a block's experts.

Expert ids are 1-based and contiguous stratum by stratum, so the experts visible
to gate ``i`` are always a suffix ``first_id(i) .. E``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .numerics import ShapeError, Tensor, glorot_uniform, matmul, relu, transpose


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class StratumLayout:
    sizes: tuple[int, ...]

    def __post_init__(self):
        if not self.sizes:
            raise LayoutError("layout needs at least one stratum")
        for s in self.sizes:
            if not isinstance(s, (int, np.integer)) or s < 1:
                raise LayoutError(f"stratum size must be a positive integer, got {s!r}")
        object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))

    @property
    def n_strata(self) -> int:
        return len(self.sizes)

    @property
    def n_experts(self) -> int:
        return sum(self.sizes)

    @cached_property
    def _starts(self) -> tuple[int, ...]:
        # 1-based id of the first expert of each stratum
        out, acc = [], 1
        for s in self.sizes:
            out.append(acc)
            acc += s
        return tuple(out)

    def stratum_of(self, expert_id: int) -> int:
        if not 1 <= expert_id <= self.n_experts:
            raise LayoutError(f"expert id {expert_id} outside 1..{self.n_experts}")
        i = int(np.searchsorted(self._starts, expert_id, side="right"))
        return i

    def stratum_of_array(self, expert_ids: np.ndarray) -> np.ndarray:
        return np.searchsorted(self._starts, expert_ids, side="right")

    def visible(self, gate_index: int) -> list[int]:
        return visible_experts(self, gate_index)

    def n_visible(self, gate_index: int) -> int:
        self._check_gate(gate_index)
        return sum(self.sizes[gate_index - 1:])

    def stratum_members(self, i: int) -> list[int]:
        self._check_gate(i)
        start = self._starts[i - 1]
        return list(range(start, start + self.sizes[i - 1]))

    def _check_gate(self, i: int) -> None:
        if not 1 <= i <= self.n_strata:
            raise LayoutError(f"gate index {i} outside 1..{self.n_strata}")

    def __str__(self) -> str:
        return "-".join(str(s) for s in self.sizes)


def parse_layout(config: str) -> StratumLayout:
    """Parse hyphenated stratum sizes such as ``"4-4-8"``."""
    text = config.strip()
    if not text:
        raise LayoutError("empty layout string")
    sizes = []
    for seg in text.split("-"):
        if not seg.strip():
            raise LayoutError(f"empty segment in layout {config!r}")
        try:
            n = int(seg)
        except ValueError:
            raise LayoutError(f"non-integer segment {seg!r} in layout {config!r}") from None
        if n < 1:
            raise LayoutError(f"segment {seg!r} in layout {config!r} must be >= 1")
        sizes.append(n)
    return StratumLayout(tuple(sizes))


def visible_experts(layout: StratumLayout, gate_index: int) -> list[int]:
    layout._check_gate(gate_index)
    return list(range(layout._starts[gate_index - 1], layout.n_experts + 1))


@dataclass
class ExpertParams:
    """One FFN expert: ``W1 @ relu(W2 @ x)``.

    ``w2`` is (d_ff x d_model) and applied first; ``w1`` is (d_model x d_ff).
    """

    expert_id: int
    w2: Tensor
    w1: Tensor

    def __post_init__(self):
        if self.w1.rows != self.w2.cols or self.w1.cols != self.w2.rows:
            raise ShapeError(f"expert {self.expert_id}: w2 {self.w2.shape} / w1 {self.w1.shape} mismatch")

    @property
    def d_model(self) -> int:
        return self.w2.cols

    @property
    def d_ff(self) -> int:
        return self.w2.rows


def init_expert(store, prefix: str, expert_id: int, d_model: int, d_ff: int,
                rng: np.random.Generator) -> ExpertParams:
    w2 = store.add(f"{prefix}.w2", glorot_uniform(rng, d_ff, d_model))
    w1 = store.add(f"{prefix}.w1", glorot_uniform(rng, d_model, d_ff))
    return ExpertParams(expert_id, w2, w1)


def ffn_forward(e: ExpertParams, x: Tensor) -> Tensor:
    """Apply the expert to each row of ``x``."""
    if x.cols != e.d_model:
        raise ShapeError(f"expert {e.expert_id}: input has {x.cols} cols, expected {e.d_model}")
    h = relu(matmul(x, transpose(e.w2)))
    return matmul(h, transpose(e.w1))
