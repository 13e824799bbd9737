"""Synthetic many-to-many translation task.

Every language renders the same set of ``n_concepts`` abstract words through its
own random permutation, into its own block of token ids.  Translating A -> B
maps each source token back to its concept and renders it in B.  Sources start
with a ``<2B>`` tag naming the target language.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .seeding import substream

PAD, BOS, EOS = 0, 1, 2
N_SPECIAL = 3


@dataclass(frozen=True)
class Vocab:
    n_languages: int
    n_concepts: int
    seed: int

    @property
    def size(self) -> int:
        return N_SPECIAL + self.n_languages + self.n_languages * self.n_concepts

    def lang_name(self, lang: int) -> str:
        return f"L{lang}"

    def lang_index(self, name: str) -> int:
        if not (name.startswith("L") and name[1:].isdigit()) or int(name[1:]) >= self.n_languages:
            raise ValueError(f"unknown language {name!r}")
        return int(name[1:])

    def tag_token(self, lang: int) -> int:
        return N_SPECIAL + lang

    def tag_text(self, lang: int) -> str:
        return f"<2{self.lang_name(lang)}>"

    def tag_from_text(self, text: str) -> int:
        if not (text.startswith("<2") and text.endswith(">")):
            raise ValueError(f"malformed language tag {text!r}")
        return self.lang_index(text[2:-1])

    @property
    def content_start(self) -> int:
        return N_SPECIAL + self.n_languages

    @cached_property
    def permutations(self) -> np.ndarray:
        rng = substream(self.seed, "data.languages")
        return np.stack([rng.permutation(self.n_concepts) for _ in range(self.n_languages)])

    def render(self, concepts, lang: int) -> np.ndarray:
        perm = self.permutations[lang]
        return self.content_start + lang * self.n_concepts + perm[np.asarray(concepts)]

    def read(self, tokens, lang: int) -> np.ndarray:
        inv = np.argsort(self.permutations[lang])
        return inv[np.asarray(tokens) - self.content_start - lang * self.n_concepts]

    def language_of(self, token: int) -> int:
        off = int(token) - self.content_start
        if off < 0 or off >= self.n_languages * self.n_concepts:
            raise ValueError(f"token {token} is not a content token")
        return off // self.n_concepts


@dataclass(frozen=True)
class Example:
    src_lang: int
    tgt_lang: int
    src: tuple[int, ...]  # tag first
    tgt: tuple[int, ...]


@dataclass
class Dataset:
    vocab: Vocab
    examples: list[Example] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.examples)

    def directions(self) -> list[tuple[int, int]]:
        return sorted({(e.src_lang, e.tgt_lang) for e in self.examples})

    def token_frequencies(self) -> np.ndarray:
        counts = np.zeros(self.vocab.size, dtype=np.int64)
        for e in self.examples:
            np.add.at(counts, list(e.src) + list(e.tgt), 1)
        return counts


def all_directions(n_languages: int) -> list[tuple[int, int]]:
    return [(a, b) for a in range(n_languages) for b in range(n_languages) if a != b]


def gen_synthetic_task(n_languages: int, n_concepts: int, examples_per_direction,
                       seed: int, *, min_len: int = 3, max_len: int = 8,
                       directions: list[tuple[int, int]] | None = None,
                       stream: str = "train") -> Dataset:
    """Generate a dataset; ``examples_per_direction`` is an int or a {(a, b): n} map."""
    if n_languages < 2:
        raise ValueError("need at least two languages")
    vocab = Vocab(n_languages, n_concepts, seed)
    dirs = directions if directions is not None else all_directions(n_languages)
    rng = substream(seed, f"data.{stream}")
    ds = Dataset(vocab)
    for a, b in dirs:
        n = examples_per_direction[(a, b)] if isinstance(examples_per_direction, dict) else examples_per_direction
        for _ in range(n):
            length = int(rng.integers(min_len, max_len + 1))
            concepts = rng.integers(0, n_concepts, size=length)
            src = (vocab.tag_token(b),) + tuple(int(t) for t in vocab.render(concepts, a))
            tgt = tuple(int(t) for t in vocab.render(concepts, b))
            ds.examples.append(Example(a, b, src, tgt))
    return ds


# ---------------------------------------------------------------- files

def write_dataset(ds: Dataset, path: Path) -> None:
    """One example per line: ``<2xx>`` tag, source ids, a tab, target ids."""
    v = ds.vocab
    lines = []
    for e in ds.examples:
        src = " ".join(str(t) for t in e.src[1:])
        tgt = " ".join(str(t) for t in e.tgt)
        lines.append(f"{v.tag_text(e.tgt_lang)} {src}\t{tgt}\n")
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_dataset(path: Path, vocab: Vocab) -> Dataset:
    ds = Dataset(vocab)
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            left, right = line.split("\t")
            tag, *src = left.split()
            tgt_lang = vocab.tag_from_text(tag)
            src_ids = tuple(int(t) for t in src)
            tgt_ids = tuple(int(t) for t in right.split())
            src_lang = vocab.language_of(src_ids[0])
        except (ValueError, IndexError) as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
        ds.examples.append(Example(src_lang, tgt_lang, (vocab.tag_token(tgt_lang),) + src_ids, tgt_ids))
    return ds


# ---------------------------------------------------------------- batching

@dataclass
class Batch:
    src: np.ndarray  # (B, S) padded, tag at column 0
    tgt_in: np.ndarray  # (B, T) BOS + target, padded
    tgt_out: np.ndarray  # (B, T) target + EOS, padded
    src_lang: np.ndarray
    tgt_lang: np.ndarray

    @property
    def size(self) -> int:
        return self.src.shape[0]


def make_batch(examples: list[Example]) -> Batch:
    if not examples:
        raise ValueError("empty batch")
    B = len(examples)
    S = max(len(e.src) for e in examples)
    T = max(len(e.tgt) for e in examples) + 1
    src = np.full((B, S), PAD, dtype=np.int64)
    tin = np.full((B, T), PAD, dtype=np.int64)
    tout = np.full((B, T), PAD, dtype=np.int64)
    for r, e in enumerate(examples):
        src[r, :len(e.src)] = e.src
        tin[r, 0] = BOS
        tin[r, 1:len(e.tgt) + 1] = e.tgt
        tout[r, :len(e.tgt)] = e.tgt
        tout[r, len(e.tgt)] = EOS
    return Batch(src, tin, tout,
                 np.array([e.src_lang for e in examples]), np.array([e.tgt_lang for e in examples]))


class BatchStream:
    """Endless shuffled batches of about ``batch_tokens`` target tokens.

    The position is checkpointable: ``state()`` captures the generator at the
    start of the current epoch plus a cursor into that epoch's order.
    """

    def __init__(self, ds: Dataset, batch_tokens: int, rng: np.random.Generator):
        if not ds.examples:
            raise ValueError("empty dataset")
        self.ds = ds
        self.batch_tokens = batch_tokens
        self.rng = rng
        self._new_epoch()

    def _new_epoch(self) -> None:
        self._epoch_state = self.rng.bit_generator.state
        self._order = self.rng.permutation(len(self.ds.examples))
        self._cursor = 0

    def __iter__(self):
        return self

    def __next__(self) -> Batch:
        if self._cursor >= len(self._order):
            self._new_epoch()
        chunk, n_tok = [], 0
        while self._cursor < len(self._order) and n_tok < self.batch_tokens:
            e = self.ds.examples[self._order[self._cursor]]
            chunk.append(e)
            n_tok += len(e.tgt) + 1
            self._cursor += 1
        return make_batch(chunk)

    def state(self) -> dict:
        return {"epoch_state": self._epoch_state, "cursor": int(self._cursor)}

    def restore(self, state: dict) -> None:
        self.rng.bit_generator.state = state["epoch_state"]
        self._new_epoch()
        self._cursor = int(state["cursor"])


def iterate_batches(ds: Dataset, batch_tokens: int, rng: np.random.Generator) -> BatchStream:
    return BatchStream(ds, batch_tokens, rng)
