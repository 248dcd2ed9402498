"""Vocabularies, corpora, token-budget batching and corpus BLEU."""
from __future__ import annotations

import logging
import math
import queue
import threading
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import ContractError, DataError

log = logging.getLogger(__name__)

EOS, UNK = "</s>", "<unk>"
EOS_ID, UNK_ID = 0, 1
RESERVED = (EOS, UNK)


class Vocabulary:
    """Token/id bijection with ``</s>`` = 0 and ``<unk>`` = 1."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tokens[:2] != list(RESERVED):
            raise DataError(f"vocabulary must start with {RESERVED}")
        self._itos = tokens
        self._stoi: dict[str, int] = {}
        for i, tok in enumerate(tokens):
            if tok in self._stoi:
                if tok in RESERVED:
                    raise DataError(f"reserved token {tok!r} redefined at id {i}")
                raise DataError(f"duplicate token {tok!r} at id {i}")
            self._stoi[tok] = i

    def __len__(self):
        return len(self._itos)

    def __contains__(self, token):
        return token in self._stoi

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self._itos == other._itos

    @property
    def tokens(self) -> list[str]:
        return list(self._itos)

    def id(self, token: str) -> int:
        return self._stoi.get(token, UNK_ID)

    def token(self, i: int) -> str:
        return self._itos[i]

    def encode(self, line: str | Sequence[str]) -> list[int]:
        toks = line.split() if isinstance(line, str) else line
        return [self._stoi.get(t, UNK_ID) for t in toks]

    def decode(self, ids: Iterable[int], strip_eos: bool = True) -> list[str]:
        out = [self._itos[i] for i in ids]
        if strip_eos and out and out[-1] == EOS:
            out = out[:-1]
        return out

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self._itos), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        path = Path(path)
        if not path.is_file():
            raise DataError(f"vocabulary file not found: {path}")
        lines = path.read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)


def build_vocab(lines: Iterable[str], max_size: int | None = None) -> Vocabulary:
    """Frequency-sorted vocabulary (ties lexicographic), reserved ids first.

    ``max_size`` counts the two reserved entries.
    """
    counts = Counter()
    for line in lines:
        counts.update(t for t in line.split() if t not in RESERVED)
    if not counts:
        raise DataError("cannot build a vocabulary from an empty corpus")
    ordered = sorted(counts, key=lambda t: (-counts[t], t))
    if max_size is not None:
        if max_size < len(RESERVED):
            raise ContractError(f"max_size must be at least {len(RESERVED)}")
        ordered = ordered[:max_size - len(RESERVED)]
    return Vocabulary(list(RESERVED) + ordered)


def read_lines(path) -> list[str]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"corpus file not found: {path}")
    text = path.read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return lines


def invert_r2l(ids: Sequence) -> list:
    """Reverse a sentence (without its ``</s>``) for right-to-left models."""
    return list(ids)[::-1]


@dataclass(frozen=True)
class Batch:
    """Padded id matrices; every row ends with one ``</s>`` before padding."""

    sources: tuple[np.ndarray, ...]
    source_masks: tuple[np.ndarray, ...]
    target: np.ndarray | None
    target_mask: np.ndarray | None
    sentence_ids: np.ndarray

    @property
    def size(self) -> int:
        return len(self.sentence_ids)

    @property
    def source_words(self) -> int:
        return int(sum(m.sum() for m in self.source_masks))

    @property
    def target_words(self) -> int:
        return 0 if self.target_mask is None else int(self.target_mask.sum())

    def cost(self) -> int:
        """Padded token slots summed over all streams."""
        mats = list(self.sources) + ([self.target] if self.target is not None else [])
        return sum(int(m.size) for m in mats)

    def split(self, parts: int) -> list["Batch"]:
        """Split by rows into ``parts`` contiguous, re-trimmed sub-batches."""
        bounds = np.array_split(np.arange(self.size), parts)
        return [self.subset(idx) for idx in bounds if len(idx)]

    def subset(self, idx) -> "Batch":
        idx = np.asarray(idx)

        def trim(ids, mask):
            ids, mask = ids[idx], mask[idx]
            width = max(int(mask.sum(axis=1).max()), 1)
            return ids[:, :width], mask[:, :width]

        srcs = [trim(s, m) for s, m in zip(self.sources, self.source_masks)]
        tgt, tmask = (None, None) if self.target is None else trim(self.target, self.target_mask)
        return Batch(tuple(s for s, _ in srcs), tuple(m for _, m in srcs), tgt, tmask,
                     self.sentence_ids[idx])


def _pad(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(s) for s in seqs) + 1
    ids = np.full((len(seqs), width), EOS_ID, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=np.float32)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        mask[i, :len(s) + 1] = 1
    return ids, mask


def make_batch(streams: Sequence[Sequence[Sequence[int]]], n_sources: int,
               sentence_ids: Sequence[int] | None = None) -> Batch:
    """Pad sentence-aligned streams; the stream after the sources is the target."""
    if len(streams) not in (n_sources, n_sources + 1):
        raise ContractError(f"expected {n_sources} or {n_sources + 1} streams, got {len(streams)}")
    n = len(streams[0])
    if any(len(s) != n for s in streams):
        raise DataError("streams are not sentence-aligned")
    srcs = [_pad(s) for s in streams[:n_sources]]
    tgt = _pad(streams[n_sources]) if len(streams) > n_sources else (None, None)
    ids = np.arange(n) if sentence_ids is None else np.asarray(sentence_ids)
    return Batch(tuple(s for s, _ in srcs), tuple(m for _, m in srcs), tgt[0], tgt[1], ids)


def batch_to_lines(batch: Batch, vocabs: Sequence[Vocabulary]) -> list[list[str]]:
    """Inverse of batching: per sentence, the detokenized lines of every stream."""
    mats = list(zip(batch.sources, batch.source_masks))
    if batch.target is not None:
        mats.append((batch.target, batch.target_mask))
    out = []
    for row in range(batch.size):
        lines = []
        for (ids, mask), vocab in zip(mats, vocabs):
            n = int(mask[row].sum())
            lines.append(" ".join(vocab.decode(ids[row, :n])))
        out.append(lines)
    return out


class Batches(list):
    """List of batches that also records how many sentences were skipped."""

    skipped: int = 0


def _slot_lengths(streams, i):
    return [len(s[i]) + 1 for s in streams]


def make_batches(streams: Sequence[Sequence[Sequence[int]]], n_sources: int,
                 token_budget: int, sort_window: int | None = None,
                 seed: int | None = 0, shuffle: bool = True) -> Batches:
    """Length-sorted greedy packing under a padded-token budget.

    Sentences are shuffled (when ``shuffle``), cut into windows of
    ``sort_window`` sentences, sorted by length within each window and packed
    so that, for every batch, the sum over streams of
    ``rows * padded length`` never exceeds ``token_budget``.
    """
    n = len(streams[0])
    if any(len(s) != n for s in streams):
        raise DataError("streams are not sentence-aligned")
    out = Batches()
    if n == 0:
        return out
    lengths = np.array([_slot_lengths(streams, i) for i in range(n)])
    rng = np.random.default_rng(seed)
    order = rng.permutation(n) if shuffle else np.arange(n)
    if sort_window is None:
        avg_rows = max(token_budget / max(lengths.sum(axis=1).mean(), 1.0), 1.0)
        sort_window = max(int(100 * avg_rows), 1)

    for start in range(0, n, sort_window):
        window = order[start:start + sort_window]
        # target length first, then sources, then position for stability
        keys = [lengths[window, j] for j in range(lengths.shape[1])]
        window = window[np.lexsort([window] + keys[:-1] + keys[-1:])]
        batches = []
        cur: list[int] = []
        cur_max = np.zeros(lengths.shape[1], dtype=np.int64)
        for i in window:
            alone = int(lengths[i].sum())
            if alone > token_budget:
                out.skipped += 1
                log.warning("sentence %d needs %d token slots, budget is %d; skipped",
                            i, alone, token_budget)
                continue
            new_max = np.maximum(cur_max, lengths[i])
            if cur and (len(cur) + 1) * int(new_max.sum()) > token_budget:
                batches.append(cur)
                cur, new_max = [], lengths[i].copy()
            cur.append(int(i))
            cur_max = new_max
        if cur:
            batches.append(cur)
        if shuffle:
            batches = [batches[k] for k in rng.permutation(len(batches))]
        for rows in batches:
            out.append(make_batch([[s[i] for i in rows] for s in streams], n_sources, rows))
    return out


def prefetch(batches: Iterable[Batch], depth: int = 4) -> Iterator[Batch]:
    """Produce batches on a background thread through a bounded queue."""
    q: queue.Queue = queue.Queue(maxsize=depth)
    done = object()

    def producer():
        try:
            for b in batches:
                q.put(b)
        except BaseException as exc:  # surfaced to the consumer
            q.put(exc)
        q.put(done)

    threading.Thread(target=producer, daemon=True).start()
    while True:
        item = q.get()
        if item is done:
            return
        if isinstance(item, BaseException):
            raise item
        yield item


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(hypotheses: Sequence[str], references: Sequence[str], max_n: int = 4) -> float:
    """Corpus BLEU in [0, 100] with clipped n-gram precisions and brevity penalty."""
    if len(hypotheses) != len(references):
        raise DataError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        h, r = hyp.split(), ref.split()
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, max_n + 1):
            hc, rc = _ngrams(h, n), _ngrams(r, n)
            matches[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            totals[n - 1] += max(len(h) - n + 1, 0)
    if hyp_len == 0 or any(m == 0 for m in matches):
        return 0.0
    log_prec = sum(math.log(m / t) for m, t in zip(matches, totals)) / max_n
    bp = 1.0 if hyp_len > ref_len else math.exp(1 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_prec)
