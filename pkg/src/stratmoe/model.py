"""Toy pre-LN encoder-decoder transformer with MoE blocks at every other FFN.

Layers are 1-based; layers 2, 4, ... of both stacks carry an MoE block.  A
stratified block owns its LayerNorm and residual, so it replaces the whole FFN
sub-layer.  Baseline MoE blocks sit inside the usual ``x + block(LN(x))``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .balance import model_aux_loss
from .data import BOS, EOS, PAD, Batch
from .experts import ExpertParams, StratumLayout, ffn_forward, init_expert, parse_layout
from .numerics import ParameterStore, Tape, Tensor
from .routing import (
    BlockOutput,
    GateParams,
    init_moe_params,
    init_smoe_params,
    run_smoe_block,
    run_stacked_block,
    run_vanilla_block,
)
from .seeding import substream

VARIANTS = ("dense", "vanilla", "switch", "stacked", "smoe")


class ConfigError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class ModelConfig:
    d_model: int = 64
    d_ff: int = 128
    n_heads: int = 4
    encoder_layers: int = 2
    decoder_layers: int = 2
    vocab_size: int = 64
    max_seq_len: int = 32
    moe_variant: str = "smoe"
    layout: str = "4-4"  # smoe only
    n_experts: int = 8  # baselines
    stack_depth: int = 2  # stacked only
    k: int = 2
    alpha: float = 0.01
    capacity_factor: float | None = 2.0
    seed: int = 0

    def validate(self) -> None:
        if self.moe_variant not in VARIANTS:
            raise ConfigError(f"moe_variant must be one of {VARIANTS}, got {self.moe_variant!r}")
        if min(self.d_model, self.d_ff, self.n_heads, self.vocab_size, self.max_seq_len) < 1:
            raise ConfigError("dimensions must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.encoder_layers < 1 or self.decoder_layers < 1:
            raise ConfigError("need at least one encoder and one decoder layer")
        if self.moe_variant == "switch" and self.k != 1:
            raise ConfigError("switch routing uses k=1")
        if self.moe_variant in ("vanilla", "stacked", "smoe") and self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.moe_variant == "stacked" and self.n_experts % self.stack_depth:
            raise ConfigError(f"{self.n_experts} experts do not split into {self.stack_depth} layers")
        if self.moe_variant == "smoe":
            lay = parse_layout(self.layout)
            if self.k > lay.sizes[-1]:
                raise ConfigError(f"k={self.k} exceeds the last stratum of {self.layout}")
        elif self.moe_variant != "dense":
            per = self.n_experts // (self.stack_depth if self.moe_variant == "stacked" else 1)
            if self.k > per:
                raise ConfigError(f"k={self.k} exceeds {per} experts per gate")

    @property
    def total_experts(self) -> int:
        if self.moe_variant == "dense":
            return 0
        if self.moe_variant == "smoe":
            return parse_layout(self.layout).n_experts
        return self.n_experts


@dataclass
class MoEBlock:
    kind: str
    gates: list[GateParams]
    experts: list[ExpertParams]
    layout: StratumLayout | None = None


@dataclass
class Layer:
    side: str
    index: int
    ln: list[tuple[Tensor, Tensor]]
    attn: list[dict[str, Tensor]]
    ffn: ExpertParams | None = None
    moe: MoEBlock | None = None


@dataclass
class BlockTrace:
    """Routing outcome of one MoE block over the non-pad rows of a batch."""

    side: str
    layer: int
    token_ids: np.ndarray
    batch_rows: np.ndarray
    positions: np.ndarray
    block: BlockOutput


@dataclass
class Model:
    config: ModelConfig
    store: ParameterStore
    embedding: Tensor
    encoder: list[Layer]
    decoder: list[Layer]
    enc_norm: tuple[Tensor, Tensor]
    dec_norm: tuple[Tensor, Tensor]
    router: np.random.Generator | None = field(default=None, repr=False)

    def moe_blocks(self) -> list[Layer]:
        return [l for l in self.encoder + self.decoder if l.moe is not None]


def _ln_params(store: ParameterStore, name: str, d: int) -> tuple[Tensor, Tensor]:
    return store.add(f"{name}.gain", np.ones((1, d))), store.add(f"{name}.bias", np.zeros((1, d)))


def _attn_params(store, name, d, rng) -> dict[str, Tensor]:
    return {w: store.add(f"{name}.{w}", nx.glorot_uniform(rng, d, d)) for w in ("wq", "wk", "wv", "wo")}


def _moe_params(store, name, cfg: ModelConfig, rng) -> MoEBlock:
    if cfg.moe_variant == "smoe":
        layout = parse_layout(cfg.layout)
        gates, experts = init_smoe_params(store, name, layout, cfg.d_model, cfg.d_ff, rng)
        return MoEBlock("smoe", gates, experts, layout)
    m = cfg.stack_depth if cfg.moe_variant == "stacked" else 1
    gates, experts = init_moe_params(store, name, cfg.n_experts, m, cfg.d_model, cfg.d_ff, rng)
    return MoEBlock(cfg.moe_variant, gates, experts)


def build_model(config: ModelConfig) -> Model:
    config.validate()
    rng = substream(config.seed, "init")
    store = ParameterStore()
    d = config.d_model
    emb = store.add("embedding", rng.normal(0.0, d ** -0.5, size=(config.vocab_size, d)))

    def make_layer(side: str, idx: int) -> Layer:
        name = f"{side}.{idx}"
        n_attn = 1 if side == "encoder" else 2
        ln = [_ln_params(store, f"{name}.ln{j}", d) for j in range(n_attn + 1)]
        attn = [_attn_params(store, f"{name}.attn{j}", d, rng) for j in range(n_attn)]
        layer = Layer(side, idx, ln, attn)
        if config.moe_variant != "dense" and idx % 2 == 0:
            layer.moe = _moe_params(store, f"{name}.moe", config, rng)
        else:
            layer.ffn = init_expert(store, f"{name}.ffn", 0, d, config.d_ff, rng)
        return layer

    encoder = [make_layer("encoder", i) for i in range(1, config.encoder_layers + 1)]
    decoder = [make_layer("decoder", i) for i in range(1, config.decoder_layers + 1)]
    return Model(config, store, emb, encoder, decoder,
                 _ln_params(store, "encoder.norm", d), _ln_params(store, "decoder.norm", d))


def count_parameters(model: Model) -> int:
    return model.store.num_scalars()


# ---------------------------------------------------------------- forward

def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d // 2)[None, :]
    ang = pos / np.power(10000.0, 2 * i / d)
    out = np.zeros((n, d))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)[:, : d - d // 2]
    return out


def _embed(model: Model, ids: np.ndarray) -> Tensor:
    B, S = ids.shape
    d = model.config.d_model
    x = nx.scale(nx.take_rows(model.embedding, ids.reshape(-1)), math.sqrt(d))
    pos = np.tile(sinusoidal_positions(S, d), (B, 1))
    return nx.add(x, Tensor(pos))


def _mha(p: dict[str, Tensor], xq: Tensor, xkv: Tensor, n_heads: int, batch: int,
         key_mask, causal: bool) -> Tensor:
    q = nx.matmul(xq, p["wq"])
    k = nx.matmul(xkv, p["wk"])
    v = nx.matmul(xkv, p["wv"])
    return nx.matmul(nx.attention(q, k, v, n_heads, batch, key_mask, causal), p["wo"])


def _ffn_sublayer(model: Model, layer: Layer, h: Tensor, valid: np.ndarray, ids: np.ndarray,
                  traces: list[BlockTrace] | None, block_outputs: list[BlockOutput]) -> Tensor:
    cfg = model.config
    gain, bias = layer.ln[-1]
    if layer.moe is None:
        return nx.add(h, ffn_forward(layer.ffn, nx.layer_norm(h, gain, bias)))
    rows = np.flatnonzero(valid)
    n = h.rows
    x = nx.take_rows(h, rows)
    moe = layer.moe
    if moe.kind == "smoe":
        out = run_smoe_block(x, moe.layout, moe.gates, moe.experts, cfg.k,
                             capacity_factor=cfg.capacity_factor, router=model.router)
        keep = Tensor((~valid).astype(np.float64)[:, None])
        h_new = nx.add(nx.mul(h, keep), nx.scatter_rows(out.output, rows, n))
    else:
        xn = nx.layer_norm(x, gain, bias)
        if moe.kind == "stacked":
            out = run_stacked_block(xn, moe.gates, moe.experts, cfg.k,
                                    capacity_factor=cfg.capacity_factor, router=model.router)
        else:
            out = run_vanilla_block(xn, moe.gates[0], moe.experts, cfg.k,
                                    capacity_factor=cfg.capacity_factor, router=model.router)
        h_new = nx.add(h, nx.scatter_rows(out.output, rows, n))
    block_outputs.append(out)
    if traces is not None:
        S = ids.shape[1]
        traces.append(BlockTrace(layer.side, layer.index, ids.reshape(-1)[rows],
                                 rows // S, rows % S, out))
    return h_new


def encode(model: Model, src: np.ndarray, traces=None, block_outputs=None) -> Tensor:
    cfg = model.config
    B, S = src.shape
    valid = (src != PAD).reshape(-1)
    key_mask = src != PAD
    block_outputs = [] if block_outputs is None else block_outputs
    h = _embed(model, src)
    for layer in model.encoder:
        g, b = layer.ln[0]
        a = nx.layer_norm(h, g, b)
        h = nx.add(h, _mha(layer.attn[0], a, a, cfg.n_heads, B, key_mask, False))
        h = _ffn_sublayer(model, layer, h, valid, src, traces, block_outputs)
    return nx.layer_norm(h, *model.enc_norm)


def decode(model: Model, memory: Tensor, src: np.ndarray, tgt_in: np.ndarray,
           traces=None, block_outputs=None) -> Tensor:
    cfg = model.config
    B, T = tgt_in.shape
    valid = (tgt_in != PAD).reshape(-1)
    self_mask = tgt_in != PAD
    mem_mask = src != PAD
    block_outputs = [] if block_outputs is None else block_outputs
    h = _embed(model, tgt_in)
    for layer in model.decoder:
        g, b = layer.ln[0]
        a = nx.layer_norm(h, g, b)
        h = nx.add(h, _mha(layer.attn[0], a, a, cfg.n_heads, B, self_mask, True))
        g, b = layer.ln[1]
        a = nx.layer_norm(h, g, b)
        h = nx.add(h, _mha(layer.attn[1], a, memory, cfg.n_heads, B, mem_mask, False))
        h = _ffn_sublayer(model, layer, h, valid, tgt_in, traces, block_outputs)
    h = nx.layer_norm(h, *model.dec_norm)
    return nx.matmul(h, nx.transpose(model.embedding))


@dataclass
class ForwardResult:
    logits: Tensor
    aux_loss: Tensor
    block_outputs: list[BlockOutput]
    traces: list[BlockTrace] | None

    def max_f(self) -> float:
        return max((o.max_first_choice_fraction() for o in self.block_outputs), default=0.0)


def _check_ids(model: Model, ids: np.ndarray, what: str) -> None:
    cfg = model.config
    if ids.ndim != 2 or ids.shape[1] == 0:
        raise ValueError(f"{what} must be a non-empty (batch, length) array")
    if ids.shape[1] > cfg.max_seq_len:
        raise ValueError(f"{what} length {ids.shape[1]} exceeds max_seq_len={cfg.max_seq_len}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ValueError(f"{what} has token ids outside 0..{cfg.vocab_size - 1}")


def forward(model: Model, batch: Batch, trace: bool = False) -> ForwardResult:
    _check_ids(model, batch.src, "source")
    _check_ids(model, batch.tgt_in, "target")
    traces = [] if trace else None
    outputs: list[BlockOutput] = []
    memory = encode(model, batch.src, traces, outputs)
    logits = decode(model, memory, batch.src, batch.tgt_in, traces, outputs)
    if outputs:
        aux = model_aux_loss([o.aux_loss(model.config.alpha) for o in outputs])
    else:
        aux = Tensor(0.0)
    return ForwardResult(logits, aux, outputs, traces)


def loss_fn(model: Model, batch: Batch) -> tuple[Tensor, Tensor, Tensor, ForwardResult]:
    res = forward(model, batch)
    task = nx.cross_entropy(res.logits, batch.tgt_out.reshape(-1), ignore_index=PAD)
    total = nx.add(task, res.aux_loss) if model.config.alpha else task
    return total, task, res.aux_loss, res


@dataclass
class StepMetrics:
    step: int
    lr: float
    task_loss: float
    aux_loss: float
    grad_norm: float
    max_f: float


def train_step(model: Model, batch: Batch, lr: float, beta1: float = 0.9,
               beta2: float = 0.98, eps: float = 1e-8, clip_norm: float = 0.0) -> StepMetrics:
    """One Adam update; ``clip_norm > 0`` rescales gradients to that global norm."""
    model.store.zero_grad()
    with Tape():
        total, task, aux, res = loss_fn(model, batch)
        if not np.isfinite(total.item()):
            raise NonFiniteLossError(f"non-finite loss {total.item()} at step {model.store.step + 1}")
        nx.backward(total)
    gnorm = model.store.grad_norm()
    if clip_norm > 0 and gnorm > clip_norm:
        for t in model.store.params.values():
            t.grad *= clip_norm / gnorm
    nx.adam_step(model.store, lr, beta1, beta2, eps)
    return StepMetrics(model.store.step, lr, task.item(), aux.item() if model.config.alpha else 0.0,
                       gnorm, res.max_f())


def greedy_decode(model: Model, src: np.ndarray, max_len: int,
                  keep_eos: bool = False) -> list[list[int]]:
    """Argmax decoding; each output stops at EOS, which is dropped unless ``keep_eos``."""
    src = np.atleast_2d(np.asarray(src, dtype=np.int64))
    _check_ids(model, src, "source")
    max_len = min(max_len, model.config.max_seq_len)
    memory = encode(model, src)
    B = src.shape[0]
    seq = np.full((B, 1), BOS, dtype=np.int64)
    done = np.zeros(B, dtype=bool)
    for _ in range(max_len):
        logits = decode(model, memory, src, seq).data.reshape(B, seq.shape[1], -1)
        nxt = logits[:, -1].argmax(axis=1)
        nxt = np.where(done, PAD, nxt)
        seq = np.concatenate([seq, nxt[:, None]], axis=1)
        done |= nxt == EOS
        if done.all():
            break
    out = []
    for row in seq[:, 1:]:
        toks = []
        for t in row:
            if t == PAD:
                break
            if t == EOS:
                if keep_eos:
                    toks.append(int(t))
                break
            toks.append(int(t))
        out.append(toks)
    return out
