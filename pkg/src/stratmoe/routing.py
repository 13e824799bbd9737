"""Stratified top-k routing plus the vanilla, Switch and stacked MoE baselines.

A stratified block runs one gate round per stratum.  Round ``i`` takes every
token currently waiting at gate ``i``, normalizes it with that stratum's
LayerNorm, scores the visible experts (strata ``i..L``), keeps the top-k under a
per-expert quota of ``ceil(2 * T_i / E_i)``, combines the surviving expert
outputs with their raw softmax weights and adds the residual.  A token whose
best surviving expert sits in stratum ``j`` exits if ``j == L`` and otherwise
waits at gate ``j + 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .balance import LoadStats, block_aux_loss, gate_balance_loss, load_stats
from .experts import ExpertParams, StratumLayout, ffn_forward, init_expert
from .numerics import (
    ParameterStore,
    ShapeError,
    Tensor,
    add,
    concat_rows,
    glorot_uniform,
    layer_norm,
    matmul,
    mul,
    pick,
    scatter_rows,
    softmax_rows,
    take_rows,
)

EXITED = -1


class RoutingInvariantError(RuntimeError):
    pass


@dataclass
class GateParams:
    """Router for gate ``gate_index``: (d_model x E_i) weight plus its LayerNorm."""

    gate_index: int
    weight: Tensor
    ln_gain: Tensor | None = None
    ln_bias: Tensor | None = None

    @property
    def n_visible(self) -> int:
        return self.weight.cols


@dataclass(frozen=True)
class RouteDecision:
    token_ref: int
    gate_index: int
    experts: tuple[int, ...]
    weights: tuple[float, ...]
    dropped: tuple[bool, ...]
    target_stratum: int


@dataclass
class TokenState:
    token_ref: int
    vector: np.ndarray
    current_gate: int
    trace: list[RouteDecision] = field(default_factory=list)


@dataclass
class GateRound:
    """Everything one gate decided for the tokens it saw, as parallel arrays."""

    gate_index: int
    token_refs: np.ndarray
    experts: np.ndarray  # (T_i, k) 1-based expert ids, descending score
    weights: np.ndarray  # (T_i, k) raw softmax entries
    dropped: np.ndarray  # (T_i, k) bool
    target_stratum: np.ndarray  # (T_i,)
    first_choice: np.ndarray  # (T_i,) 0-based column of the pre-capacity argmax
    probs: Tensor
    quota: int | None
    x_in: np.ndarray | None = None  # rows entering the round
    x_out: np.ndarray | None = None  # rows leaving it

    @property
    def n_tokens(self) -> int:
        return int(self.token_refs.shape[0])

    def decisions(self) -> list[RouteDecision]:
        return [
            RouteDecision(
                int(self.token_refs[r]), self.gate_index,
                tuple(int(e) for e in self.experts[r]),
                tuple(float(w) for w in self.weights[r]),
                tuple(bool(d) for d in self.dropped[r]),
                int(self.target_stratum[r]),
            )
            for r in range(self.n_tokens)
        ]

    def load_stats(self) -> LoadStats:
        return load_stats(self.gate_index, self.probs, self.first_choice)


@dataclass
class BlockOutput:
    output: Tensor
    rounds: list[GateRound]
    hops: np.ndarray
    expert_evals: np.ndarray
    expert_load: np.ndarray  # non-dropped assignments per expert (index = id - 1)
    expert_drops: np.ndarray
    n_gates: int
    k: int

    def load_stats(self) -> list[LoadStats]:
        return [r.load_stats() for r in self.rounds]

    def aux_loss(self, alpha: float) -> Tensor:
        losses = [gate_balance_loss(r.load_stats()) for r in self.rounds]
        return block_aux_loss(losses, self.n_gates, alpha)

    def max_first_choice_fraction(self) -> float:
        return max((r.load_stats().max_f for r in self.rounds), default=0.0)

    def token_states(self) -> list[TokenState]:
        states = [TokenState(t, self.output.data[t].copy(), EXITED) for t in range(self.output.rows)]
        for rnd in self.rounds:
            for d in rnd.decisions():
                states[d.token_ref].trace.append(d)
        return states


# ---------------------------------------------------------------- parameters

def init_smoe_params(store: ParameterStore, prefix: str, layout: StratumLayout, d_model: int,
                     d_ff: int, rng: np.random.Generator) -> tuple[list[GateParams], list[ExpertParams]]:
    gates = []
    for i in range(1, layout.n_strata + 1):
        w = store.add(f"{prefix}.gate{i}.w", glorot_uniform(rng, d_model, layout.n_visible(i)))
        g = store.add(f"{prefix}.gate{i}.ln.gain", np.ones((1, d_model)))
        b = store.add(f"{prefix}.gate{i}.ln.bias", np.zeros((1, d_model)))
        gates.append(GateParams(i, w, g, b))
    experts = [init_expert(store, f"{prefix}.expert{e}", e, d_model, d_ff, rng)
               for e in range(1, layout.n_experts + 1)]
    return gates, experts


def init_moe_params(store: ParameterStore, prefix: str, n_experts: int, n_layers: int,
                    d_model: int, d_ff: int, rng: np.random.Generator
                    ) -> tuple[list[GateParams], list[ExpertParams]]:
    """Gates and experts for a vanilla (``n_layers=1``) or stacked baseline block."""
    if n_layers < 1 or n_experts % n_layers:
        raise ShapeError(f"{n_experts} experts cannot be split into {n_layers} sub-layers")
    per = n_experts // n_layers
    gates = [GateParams(s + 1, store.add(f"{prefix}.gate{s + 1}.w", glorot_uniform(rng, d_model, per)))
             for s in range(n_layers)]
    experts = [init_expert(store, f"{prefix}.expert{e}", e, d_model, d_ff, rng)
               for e in range(1, n_experts + 1)]
    return gates, experts


# ---------------------------------------------------------------- primitives

def gate_scores(gate: GateParams, x_norm: Tensor) -> Tensor:
    if x_norm.cols != gate.weight.rows:
        raise ShapeError(f"gate {gate.gate_index}: input has {x_norm.cols} cols, "
                         f"weight expects {gate.weight.rows}")
    return softmax_rows(matmul(x_norm, gate.weight))


def topk_rows(probs: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Column indices and values of the k largest entries per row.

    Descending by value; ties go to the lower column.
    """
    if not 1 <= k <= probs.shape[1]:
        raise ValueError(f"k={k} must lie in 1..{probs.shape[1]}")
    idx = np.argsort(-probs, axis=1, kind="stable")[:, :k]
    return idx, np.take_along_axis(probs, idx, axis=1)


def select_topk(probs_row, k: int, expert_ids=None) -> list[tuple[int, float]]:
    """Top-k ``(expert_id, weight)`` pairs for one token; ids default to 1..E_i."""
    row = np.asarray(probs_row, dtype=np.float64).reshape(1, -1)
    ids = np.arange(1, row.shape[1] + 1) if expert_ids is None else np.asarray(expert_ids)
    idx, vals = topk_rows(row, k)
    return [(int(ids[c]), float(v)) for c, v in zip(idx[0], vals[0])]


def capacity_quota(n_tokens: int, n_visible: int, factor: float = 2.0) -> int:
    return math.ceil(factor * n_tokens / n_visible)


def apply_capacity(choices: np.ndarray, quota: int) -> np.ndarray:
    """Drop flags for a (T x k) array of expert ids, rows in ascending token order.

    Slots are filled first-choice column first, then second choice, each in
    row order; an assignment that finds its expert full is dropped and takes no
    slot.
    """
    choices = np.asarray(choices, dtype=np.int64)
    n, k = choices.shape
    dropped = np.zeros((n, k), dtype=bool)
    if n == 0:
        return dropped
    used = np.zeros(int(choices.max()) + 1, dtype=np.int64)
    for c in range(k):
        ids = choices[:, c]
        order = np.argsort(ids, kind="stable")
        sorted_ids = ids[order]
        starts = np.r_[0, np.flatnonzero(np.diff(sorted_ids)) + 1]
        lengths = np.diff(np.r_[starts, n])
        occurrence = np.empty(n, dtype=np.int64)
        occurrence[order] = np.arange(n) - np.repeat(starts, lengths)
        keep = used[ids] + occurrence < quota
        dropped[:, c] = ~keep
        used += np.bincount(ids[keep], minlength=used.shape[0])
    return dropped


def _combine(x_in: Tensor, probs: Tensor, cols: np.ndarray, dropped: np.ndarray,
             experts_by_col: list[ExpertParams]) -> Tensor | None:
    """Sum of surviving ``G[t, e] * FFN_e(x_in[t])`` per row, or None if nothing survives."""
    pieces, rows_out = [], []
    live = ~dropped
    for c, expert in enumerate(experts_by_col):
        r, _ = np.nonzero((cols == c) & live)
        if r.size == 0:
            continue
        h = ffn_forward(expert, take_rows(x_in, r))
        w = pick(probs, r, np.full(r.size, c))
        pieces.append(mul(h, w))
        rows_out.append(r)
    if not pieces:
        return None
    stacked = pieces[0] if len(pieces) == 1 else concat_rows(pieces)
    return scatter_rows(stacked, np.concatenate(rows_out), x_in.rows)


def _uniform_probs(rng: np.random.Generator, n: int, m: int) -> Tensor:
    # forced-uniform mode: random logits make every ordered top-k equally likely
    return softmax_rows(Tensor(rng.random((n, m))))


# ---------------------------------------------------------------- blocks

def run_smoe_block(x: Tensor, layout: StratumLayout, gates: list[GateParams],
                   experts: list[ExpertParams], k: int = 2, *,
                   capacity_factor: float | None = 2.0, normalize: bool = True,
                   residual: bool = True, router: np.random.Generator | None = None,
                   ln_eps: float = 1e-5) -> BlockOutput:
    """Route every row of ``x`` through the stratified block.

    ``router`` switches to forced-uniform routing driven by that generator.
    ``capacity_factor=None`` disables dropping.
    """
    L, E = layout.n_strata, layout.n_experts
    if len(gates) != L or len(experts) != E:
        raise ShapeError(f"layout {layout} needs {L} gates and {E} experts, "
                         f"got {len(gates)} and {len(experts)}")
    T = x.rows
    hops = np.zeros(T, dtype=np.int64)
    evals = np.zeros(T, dtype=np.int64)
    load = np.zeros(E, dtype=np.int64)
    drops = np.zeros(E, dtype=np.int64)
    waiting: dict[int, list[tuple[Tensor, np.ndarray]]] = {i: [] for i in range(1, L + 1)}
    waiting[1].append((x, np.arange(T)))
    exited: list[tuple[Tensor, np.ndarray]] = []
    rounds: list[GateRound] = []

    for i in range(1, L + 1):
        parts = waiting.pop(i)
        if not parts:
            continue
        xs = parts[0][0] if len(parts) == 1 else concat_rows([p[0] for p in parts])
        refs = np.concatenate([p[1] for p in parts])
        order = np.argsort(refs, kind="stable")
        if np.any(order != np.arange(order.size)):
            xs, refs = take_rows(xs, order), refs[order]
        gate = gates[i - 1]
        E_i = layout.n_visible(i)
        if gate.n_visible != E_i:
            raise ShapeError(f"gate {i} scores {gate.n_visible} experts, layout has {E_i} visible")
        x_norm = layer_norm(xs, gate.ln_gain, gate.ln_bias, ln_eps) if normalize else xs
        probs = _uniform_probs(router, xs.rows, E_i) if router is not None else gate_scores(gate, x_norm)
        first_id = E - E_i + 1
        cols, weights = topk_rows(probs.data, k)
        ids = cols + first_id
        quota = None if capacity_factor is None else capacity_quota(xs.rows, E_i, capacity_factor)
        dropped = np.zeros_like(ids, dtype=bool) if quota is None else apply_capacity(ids, quota)

        y = _combine(x_norm, probs, cols, dropped, experts[first_id - 1:])
        if residual:
            out = xs if y is None else add(y, xs)
        else:
            out = Tensor(np.zeros(xs.shape)) if y is None else y

        live = ~dropped
        any_live = live.any(axis=1)
        best = np.where(any_live, ids[np.arange(ids.shape[0]), live.argmax(axis=1)], ids[:, 0])
        target = layout.stratum_of_array(best)
        if np.any(target < i):
            raise RoutingInvariantError(f"gate {i} sent tokens back to stratum {target.min()}")

        hops[refs] += 1
        evals[refs] += live.sum(axis=1)
        np.add.at(load, ids[live] - 1, 1)
        np.add.at(drops, ids[dropped] - 1, 1)
        rounds.append(GateRound(i, refs, ids, weights, dropped, target,
                                cols[:, 0].copy(), probs, quota, xs.data, out.data))

        for j in np.unique(target):
            sel = np.flatnonzero(target == j)
            piece = out if sel.size == out.rows else take_rows(out, sel)
            if j == L:
                exited.append((piece, refs[sel]))
            else:
                waiting[int(j) + 1].append((piece, refs[sel]))

    if any(waiting.values()):
        raise RoutingInvariantError("tokens still waiting after the last gate")
    ys = exited[0][0] if len(exited) == 1 else concat_rows([p[0] for p in exited])
    refs = np.concatenate([p[1] for p in exited])
    if refs.size != T:
        raise RoutingInvariantError(f"{refs.size} of {T} tokens exited")
    if np.any(refs != np.arange(T)):
        inverse = np.empty(T, dtype=np.int64)
        inverse[refs] = np.arange(T)
        ys = take_rows(ys, inverse)
    return BlockOutput(ys, rounds, hops, evals, load, drops, L, k)


def run_vanilla_block(x: Tensor, gate: GateParams, experts: list[ExpertParams], k: int = 2, *,
                      capacity_factor: float | None = 2.0,
                      router: np.random.Generator | None = None) -> BlockOutput:
    """Single gate over all experts, no internal LayerNorm or residual (k=1 is Switch)."""
    E, T = len(experts), x.rows
    if gate.n_visible != E:
        raise ShapeError(f"gate scores {gate.n_visible} experts, block has {E}")
    probs = _uniform_probs(router, T, E) if router is not None else gate_scores(gate, x)
    cols, weights = topk_rows(probs.data, k)
    ids = cols + 1
    quota = None if capacity_factor is None else capacity_quota(T, E, capacity_factor)
    dropped = np.zeros_like(ids, dtype=bool) if quota is None else apply_capacity(ids, quota)

    contributions = []
    for e, expert in enumerate(experts):
        for slot in range(k):
            rows = np.flatnonzero((cols[:, slot] == e) & ~dropped[:, slot])
            if rows.size == 0:
                continue
            h = ffn_forward(expert, take_rows(x, rows))
            g = pick(probs, rows, np.full(rows.size, e))
            contributions.append(scatter_rows(mul(h, g), rows, T))
    if contributions:
        out = contributions[0]
        for c in contributions[1:]:
            out = add(out, c)
    else:
        out = Tensor(np.zeros(x.shape))

    live = ~dropped
    load = np.bincount(ids[live] - 1, minlength=E)
    drops = np.bincount(ids[dropped] - 1, minlength=E)
    target = np.ones(T, dtype=np.int64)
    rnd = GateRound(1, np.arange(T), ids, weights, dropped, target, cols[:, 0].copy(), probs,
                    quota, x.data, out.data)
    return BlockOutput(out, [rnd], np.ones(T, dtype=np.int64), live.sum(axis=1),
                       load, drops, 1, k)


def run_stacked_block(x: Tensor, gates: list[GateParams], experts: list[ExpertParams],
                      k: int = 2, *, capacity_factor: float | None = 2.0,
                      router: np.random.Generator | None = None) -> BlockOutput:
    """``len(gates)`` vanilla MoE layers applied back to back with nothing in between."""
    m = len(gates)
    if m < 1 or len(experts) % m:
        raise ShapeError(f"{len(experts)} experts cannot be split into {m} sub-layers")
    per = len(experts) // m
    h = x
    rounds, loads, drops = [], [], []
    evals = np.zeros(x.rows, dtype=np.int64)
    for s, gate in enumerate(gates):
        sub = run_vanilla_block(h, gate, experts[s * per:(s + 1) * per], k,
                                capacity_factor=capacity_factor, router=router)
        h = sub.output
        rnd = sub.rounds[0]
        rnd.gate_index = s + 1
        rnd.experts = rnd.experts + s * per
        rnd.target_stratum = np.full(x.rows, s + 1, dtype=np.int64)
        rounds.append(rnd)
        loads.append(sub.expert_load)
        drops.append(sub.expert_drops)
        evals += sub.expert_evals
    return BlockOutput(h, rounds, np.full(x.rows, m, dtype=np.int64), evals,
                       np.concatenate(loads), np.concatenate(drops), m, k)
