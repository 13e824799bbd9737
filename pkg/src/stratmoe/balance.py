"""Load-balancing auxiliary loss for stratified and vanilla gates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Tensor, add, mean_rows, mul, scale, sum_all


@dataclass
class LoadStats:
    """Per-gate routing statistics for one round.

    ``first_choice_fractions`` counts each token's pre-capacity argmax and is a
    constant; ``mean_probs`` is the (1 x E_i) column mean of the gate softmax
    and stays on the tape.
    """

    gate_index: int
    n_visible: int
    first_choice_fractions: np.ndarray
    mean_probs: Tensor
    n_tokens: int

    @property
    def max_f(self) -> float:
        return float(self.first_choice_fractions.max()) if self.n_tokens else 0.0


def load_stats(gate_index: int, probs: Tensor, first_choice: np.ndarray) -> LoadStats:
    """Build stats from a (T_i x E_i) softmax and 0-based first-choice columns."""
    n_tokens, n_visible = probs.shape
    counts = np.bincount(np.asarray(first_choice, dtype=np.int64), minlength=n_visible)
    f = counts / max(n_tokens, 1)
    return LoadStats(gate_index, n_visible, f, mean_rows(probs), n_tokens)


def gate_balance_loss(stats: LoadStats) -> Tensor:
    if stats.n_tokens == 0:
        return Tensor(0.0)
    f = Tensor(stats.first_choice_fractions.reshape(1, -1))
    return scale(sum_all(mul(stats.mean_probs, f)), float(stats.n_visible))


def block_aux_loss(gate_losses: list[Tensor | None], n_strata: int, alpha: float) -> Tensor:
    """alpha * (1/L) * sum of per-gate losses; gates that saw no tokens add 0."""
    if n_strata < 1:
        raise ValueError("n_strata must be >= 1")
    present = [g for g in gate_losses if g is not None]
    if not present or alpha == 0.0:
        return Tensor(0.0)
    total = present[0]
    for g in present[1:]:
        total = add(total, g)
    return scale(total, alpha / n_strata)


def model_aux_loss(block_losses: list[Tensor]) -> Tensor:
    if not block_losses:
        raise ValueError("model_aux_loss needs at least one block")
    total = block_losses[0]
    for b in block_losses[1:]:
        total = add(total, b)
    return scale(total, 1.0 / len(block_losses))
