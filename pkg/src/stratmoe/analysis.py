"""Requested-capacity (RC) records and the three reports built from them.

RC is kept in two flavours: ``hops`` counts gate rounds a token took inside a
block, ``expert_evals`` counts the expert FFNs actually applied to it.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import astuple, dataclass, fields
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

RECORD_COLUMNS = ("split", "src_lang", "tgt_lang", "side", "block_layer", "token_id", "hops", "expert_evals")
DIRECTION_COLUMNS = ("src_lang", "tgt_lang", "side", "mean_hops", "mean_evals", "n")
TOKEN_COLUMNS = ("group", "token_id", "mean_hops", "freq_rank", "n")
BLOCK_COLUMNS = ("side", "block_layer", "mean_hops", "mean_evals", "n")
FREQ_COLUMNS = ("token_id", "count")

_SIDE_ORDER = {"encoder": 0, "decoder": 1}


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class RcRecord:
    split: str
    src_lang: str
    tgt_lang: str
    side: str
    block_layer: int
    token_id: int
    hops: int
    expert_evals: int


@dataclass(frozen=True)
class RcReport:
    key: tuple
    mean_hops: float
    mean_evals: float
    n: int


@dataclass(frozen=True)
class TokenRc:
    group: str  # "high" or "low"
    token_id: int
    mean_hops: float
    freq_rank: int
    n: int


def records_from_traces(traces, src_lang: np.ndarray, tgt_lang: np.ndarray, split: str,
                        lang_name: Callable[[int], str] = lambda i: f"L{i}") -> list[RcRecord]:
    """Flatten model BlockTraces into per-token, per-block records.

    ``src_lang``/``tgt_lang`` give each batch row's direction.
    """
    out = []
    for tr in traces:
        blk = tr.block
        for tok, row, h, e in zip(tr.token_ids, tr.batch_rows, blk.hops, blk.expert_evals):
            out.append(RcRecord(split, lang_name(int(src_lang[row])), lang_name(int(tgt_lang[row])),
                                tr.side, int(tr.layer), int(tok), int(h), int(e)))
    return out


def _grouped(records: Iterable[RcRecord], key) -> dict:
    groups = defaultdict(list)
    for r in records:
        groups[key(r)].append(r)
    return groups


def _summary(key, recs: list[RcRecord]) -> RcReport:
    hops = np.fromiter((r.hops for r in recs), dtype=np.float64, count=len(recs))
    evals = np.fromiter((r.expert_evals for r in recs), dtype=np.float64, count=len(recs))
    return RcReport(key, float(hops.mean()), float(evals.mean()), len(recs))


def rc_by_direction(records: Iterable[RcRecord]) -> list[RcReport]:
    """Mean RC per (src, tgt, side), pooling every MoE block on that side."""
    groups = _grouped(records, lambda r: (r.src_lang, r.tgt_lang, r.side))
    order = sorted(groups, key=lambda k: (k[0], k[1], _SIDE_ORDER.get(k[2], 2), k[2]))
    return [_summary(k, groups[k]) for k in order]


def rc_by_block(records: Iterable[RcRecord]) -> list[RcReport]:
    """Mean RC per block, encoder blocks first, each side by layer index."""
    groups = _grouped(records, lambda r: (r.side, r.block_layer))
    order = sorted(groups, key=lambda k: (_SIDE_ORDER.get(k[0], 2), k[0], k[1]))
    return [_summary(k, groups[k]) for k in order]


def frequency_ranks(freqs: np.ndarray) -> np.ndarray:
    """Rank 0 is the most frequent token; ties go to the lower id."""
    order = np.argsort(-np.asarray(freqs), kind="stable")
    ranks = np.empty(len(order), dtype=np.int64)
    ranks[order] = np.arange(len(order))
    return ranks


def rc_by_token_frequency(records: list[RcRecord], freqs: np.ndarray, top_n: int = 25) -> list[TokenRc]:
    """High- and low-RC token sets with their training-frequency ranks.

    Tokens are picked per block and direction by mean hops, then each set is
    de-duplicated; a token's reported mean pools all of its records.
    """
    freqs = np.asarray(freqs)
    ranks = frequency_ranks(freqs)
    records = list(records)
    if records and max(r.token_id for r in records) >= len(freqs):
        raise ValueError("frequency table does not cover every token id in the records")
    top_n = min(top_n, len(freqs))

    per_token = _grouped(records, lambda r: r.token_id)
    selected: dict[str, set[int]] = {"high": set(), "low": set()}
    groups = _grouped(records, lambda r: (r.side, r.block_layer, r.src_lang, r.tgt_lang))
    for recs in groups.values():
        by_tok = _grouped(recs, lambda r: r.token_id)
        means = sorted((np.mean([r.hops for r in rs]), tok) for tok, rs in by_tok.items())
        selected["low"].update(tok for _, tok in means[:top_n])
        selected["high"].update(tok for _, tok in sorted(means, key=lambda m: (-m[0], m[1]))[:top_n])

    out = []
    for group in ("high", "low"):
        for tok in sorted(selected[group]):
            rs = per_token[tok]
            out.append(TokenRc(group, tok, float(np.mean([r.hops for r in rs])), int(ranks[tok]), len(rs)))
    return out


# CSV I/O

def _write(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        w.writerows(rows)


def _read(path: Path, columns) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for c in columns:
            if c not in header:
                raise SchemaError(f"{path}: missing column {c!r}")
        return list(reader)


def write_records(path: Path, records: Iterable[RcRecord]) -> None:
    _write(path, RECORD_COLUMNS, (astuple(r) for r in records))


def read_records(path: Path) -> list[RcRecord]:
    types = {f.name: f.type for f in fields(RcRecord)}
    return [RcRecord(**{c: int(row[c]) if types[c] == "int" else row[c] for c in RECORD_COLUMNS})
            for row in _read(path, RECORD_COLUMNS)]


def write_frequencies(path: Path, freqs: np.ndarray) -> None:
    _write(path, FREQ_COLUMNS, enumerate(int(c) for c in freqs))


def read_frequencies(path: Path) -> np.ndarray:
    rows = _read(path, FREQ_COLUMNS)
    freqs = np.zeros(max((int(r["token_id"]) for r in rows), default=-1) + 1, dtype=np.int64)
    for r in rows:
        freqs[int(r["token_id"])] = int(r["count"])
    return freqs


def write_direction_report(path: Path, rows: list[RcReport]) -> None:
    _write(path, DIRECTION_COLUMNS, ((*r.key, repr(r.mean_hops), repr(r.mean_evals), r.n) for r in rows))


def write_block_report(path: Path, rows: list[RcReport]) -> None:
    _write(path, BLOCK_COLUMNS, ((*r.key, repr(r.mean_hops), repr(r.mean_evals), r.n) for r in rows))


def write_token_report(path: Path, rows: list[TokenRc]) -> None:
    _write(path, TOKEN_COLUMNS, ((r.group, r.token_id, repr(r.mean_hops), r.freq_rank, r.n) for r in rows))


def read_report(path: Path, columns) -> list[dict]:
    return _read(path, columns)


def write_reports(records: list[RcRecord], freqs: np.ndarray, out_dir: Path, top_n: int = 25) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {name: out_dir / f"{name}.csv" for name in ("rc_by_direction", "rc_tokens", "rc_by_block")}
    write_direction_report(paths["rc_by_direction"], rc_by_direction(records))
    write_token_report(paths["rc_tokens"], rc_by_token_frequency(records, freqs, top_n))
    write_block_report(paths["rc_by_block"], rc_by_block(records))
    return paths
