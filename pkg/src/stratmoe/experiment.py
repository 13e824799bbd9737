"""Dataset generation, training and evaluation runs backing the CLI."""

from __future__ import annotations

import csv
import json
from contextlib import contextmanager
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .analysis import RcRecord, records_from_traces, write_frequencies
from .config import RunConfig, parse_config, serialize_config
from .data import EOS, Dataset, Vocab, gen_synthetic_task, iterate_batches, make_batch, read_dataset, write_dataset
from .model import Model, NonFiniteLossError, build_model, forward, greedy_decode, train_step
from .numerics import inverse_sqrt_lr
from .seeding import substream

METRIC_COLUMNS = ("step", "lr", "task_loss", "aux_loss", "max_f")
CHECKPOINT_NAME = "checkpoint.bin"
METRICS_NAME = "metrics.csv"


class RunError(RuntimeError):
    pass


# data

def gen_data(out_dir: Path, n_languages: int = 4, n_concepts: int = 12, train_per_direction: int = 200,
             dev_per_direction: int = 25, seed: int = 0, min_len: int = 3, max_len: int = 8) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train = gen_synthetic_task(n_languages, n_concepts, train_per_direction, seed,
                               min_len=min_len, max_len=max_len, stream="train")
    dev = gen_synthetic_task(n_languages, n_concepts, dev_per_direction, seed,
                             min_len=min_len, max_len=max_len, stream="dev")
    paths = {"train": out_dir / "train.txt", "dev": out_dir / "dev.txt",
             "meta": out_dir / "meta.json", "freq": out_dir / "freq.csv"}
    write_dataset(train, paths["train"])
    write_dataset(dev, paths["dev"])
    meta = {"n_languages": n_languages, "n_concepts": n_concepts, "seed": seed,
            "vocab_size": train.vocab.size, "min_len": min_len, "max_len": max_len}
    paths["meta"].write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    write_frequencies(paths["freq"], train.token_frequencies())
    return paths


def load_vocab(data_dir: Path) -> Vocab:
    try:
        meta = json.loads((Path(data_dir) / "meta.json").read_text())
    except FileNotFoundError:
        raise RunError(f"{data_dir}: no meta.json (run gen-data first)") from None
    return Vocab(meta["n_languages"], meta["n_concepts"], meta["seed"])


def load_split(data_dir: Path, split: str, vocab: Vocab | None = None) -> Dataset:
    vocab = vocab or load_vocab(data_dir)
    path = Path(data_dir) / f"{split}.txt"
    if not path.exists():
        raise RunError(f"{path}: no such dataset file")
    return read_dataset(path, vocab)


# training

@dataclass
class TrainResult:
    model: Model
    metrics: list[dict]
    checkpoint: Path


def _metric_row(m) -> dict:
    return {"step": m.step, "lr": m.lr, "task_loss": m.task_loss, "aux_loss": m.aux_loss, "max_f": m.max_f}


def _write_metrics(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, METRIC_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def read_metrics(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


def _same_run(a: RunConfig, b: RunConfig) -> bool:
    # a resumed run may extend the step budget, nothing else
    return replace(a, steps=0) == replace(b, steps=0)


def train(cfg: RunConfig, resume: bool = False, train_ds: Dataset | None = None) -> TrainResult:
    """Train per ``cfg``, writing metrics.csv, config.txt and checkpoint.bin into ``cfg.out``.

    On a non-finite loss the last good weights are saved with the failure flag
    set and :class:`NonFiniteLossError` propagates.
    """
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    if train_ds is None:
        train_ds = load_split(cfg.data, "train")
    cfg = replace(cfg, model=replace(cfg.model, vocab_size=train_ds.vocab.size))
    cfg.validate()
    model = build_model(cfg.model)
    stream = iterate_batches(train_ds, cfg.batch_tokens, substream(cfg.seed, "batches"))
    metrics: list[dict] = []
    ck_path = out / CHECKPOINT_NAME

    if resume:
        if not ck_path.exists():
            raise RunError(f"{ck_path}: nothing to resume from")
        ck = ckpt_io.load(ck_path)
        if ck.failed:
            raise RunError(f"{ck_path}: checkpoint is marked as failed")
        if not _same_run(parse_config(ck.config_text), cfg):
            raise RunError("config differs from the checkpoint's beyond the step budget")
        ckpt_io.restore(model.store, ck)
        stream.restore(ck.extra["batches"])
        if (out / METRICS_NAME).exists():
            metrics = [r for r in read_metrics(out / METRICS_NAME) if r["step"] <= ck.step]

    text = serialize_config(cfg)
    (out / "config.txt").write_text(text)

    def save(failed=False):
        ckpt_io.save(ck_path, text, model.store, failed=failed, extra={"batches": stream.state()})

    try:
        while model.store.step < cfg.steps:
            step = model.store.step + 1
            batch = next(stream)
            m = train_step(model, batch, inverse_sqrt_lr(step, cfg.warmup, cfg.peak_lr), clip_norm=cfg.clip_norm)
            metrics.append(_metric_row(m))
            if step % cfg.checkpoint_every == 0:
                save()
                _write_metrics(out / METRICS_NAME, metrics)
    except NonFiniteLossError:
        # weights were not updated by the failing step
        save(failed=True)
        _write_metrics(out / METRICS_NAME, metrics)
        raise
    save()
    _write_metrics(out / METRICS_NAME, metrics)
    return TrainResult(model, metrics, ck_path)


def load_model(path: Path, expect: RunConfig | None = None) -> tuple[Model, RunConfig]:
    ck = ckpt_io.load(path)
    cfg = parse_config(ck.config_text)
    if expect is not None and not _same_run(expect, cfg):
        raise RunError(f"{path}: checkpoint config does not match the given config")
    model = build_model(cfg.model)
    try:
        ckpt_io.restore(model.store, ck)
    except ckpt_io.CheckpointError as exc:
        raise RunError(str(exc)) from None
    return model, cfg


# evaluation

@contextmanager
def eval_capacity(model: Model, capacity_factor: float | None):
    """Temporarily swap the capacity factor used by the model's MoE blocks.

    Evaluation defaults to no limit so a token's output does not depend on
    which other sentences share its batch.
    """
    saved = model.config
    model.config = replace(saved, capacity_factor=capacity_factor)
    try:
        yield model
    finally:
        model.config = saved

@dataclass
class EvalResult:
    accuracy: dict[tuple[int, int], float]
    overall: float
    records: list[RcRecord]


def token_accuracy(model: Model, examples, batch_size: int = 256) -> tuple[int, int]:
    """Greedy-decoded positions matching the reference target plus EOS."""
    correct = total = 0
    for i in range(0, len(examples), batch_size):
        chunk = examples[i:i + batch_size]
        batch = make_batch(chunk)
        max_len = max(len(e.tgt) for e in chunk) + 1
        hyps = greedy_decode(model, batch.src, max_len, keep_eos=True)
        for e, h in zip(chunk, hyps):
            ref = list(e.tgt) + [EOS]
            correct += sum(int(a == b) for a, b in zip(h, ref))
            total += len(ref)
    return correct, total


def evaluate(model: Model, ds: Dataset, split: str = "dev", trace: bool = True,
             batch_size: int = 256, capacity_factor: float | None = None) -> EvalResult:
    if ds.vocab.size != model.config.vocab_size:
        raise RunError(f"dataset vocabulary ({ds.vocab.size}) does not match the model ({model.config.vocab_size})")
    acc = {}
    all_c = all_t = 0
    records = []
    with eval_capacity(model, capacity_factor):
        for d in ds.directions():
            exs = [e for e in ds.examples if (e.src_lang, e.tgt_lang) == d]
            c, t = token_accuracy(model, exs, batch_size)
            acc[d] = c / t
            all_c, all_t = all_c + c, all_t + t
        if trace and model.config.moe_variant != "dense":
            records = collect_records(model, ds, split, batch_size, capacity_factor)
    return EvalResult(acc, all_c / max(all_t, 1), records)


def collect_records(model: Model, ds: Dataset, split: str, batch_size: int = 256,
                    capacity_factor: float | None = None) -> list[RcRecord]:
    """RC records from teacher-forced passes over ``ds``."""
    records = []
    with eval_capacity(model, capacity_factor):
        for i in range(0, len(ds.examples), batch_size):
            batch = make_batch(ds.examples[i:i + batch_size])
            res = forward(model, batch, trace=True)
            records += records_from_traces(res.traces, batch.src_lang, batch.tgt_lang, split, ds.vocab.lang_name)
    return records


@dataclass
class GateLoad:
    side: str
    layer: int
    gate: int
    n_visible: int
    max_f: float

    @property
    def threshold(self) -> float:
        return 2.0 / self.n_visible


def gate_loads(model: Model, ds: Dataset, batch_size: int = 1024,
               capacity_factor: float | None = None) -> list[GateLoad]:
    """Largest first-choice fraction of every gate, pooled over ``ds``."""
    counts: dict[tuple, np.ndarray] = {}
    for i in range(0, len(ds.examples), batch_size):
        with eval_capacity(model, capacity_factor):
            res = forward(model, make_batch(ds.examples[i:i + batch_size]), trace=True)
        for tr in res.traces:
            for rnd in tr.block.rounds:
                key = (tr.side, tr.layer, rnd.gate_index)
                n = rnd.probs.cols
                c = np.bincount(rnd.first_choice, minlength=n) if rnd.n_tokens else np.zeros(n, int)
                counts[key] = counts.get(key, 0) + c
    return [GateLoad(s, l, g, len(c), float(c.max() / c.sum()) if c.sum() else 0.0)
            for (s, l, g), c in sorted(counts.items(), key=lambda kv: (kv[0][0] != "encoder", kv[0][1:]))]
