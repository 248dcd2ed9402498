"""Batched beam search, ensembling, forced-decoding scores and n-best rescoring."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import ops
from .data import EOS_ID, Batch, Vocabulary, invert_r2l, make_batch, read_lines
from .errors import ContractError, DataError
from .framework import Model

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple[int, ...]  # ends with </s> when finished
    score: float  # cumulative ensemble log-prob
    model_scores: tuple[float, ...] = ()
    finished: bool = True
    normalized: float = 0.0

    @property
    def words(self) -> tuple[int, ...]:
        return self.tokens[:-1] if self.finished and self.tokens else self.tokens


@dataclass
class NBestEntry:
    sentence: int
    tokens: list[str]
    features: dict[str, float] = field(default_factory=dict)
    total: float = 0.0


def normalize(score: float, length: int, alpha: float) -> float:
    return score / (max(length, 1) ** alpha) if alpha else score


def _rank_key(h: Hypothesis):
    return (-h.normalized, h.tokens)


def batch_view(batch: Batch, n_sources: int) -> Batch:
    """The batch as seen by a model with ``n_sources`` encoders."""
    return replace(batch, sources=batch.sources[:n_sources],
                   source_masks=batch.source_masks[:n_sources])


def check_ensemble(models: Sequence[Model]) -> None:
    if not models:
        raise ContractError("need at least one model")
    sizes = {m.config.vocab_sizes[-1] for m in models}
    if len(sizes) != 1:
        raise ContractError(f"ensemble members disagree on target vocabulary size: {sorted(sizes)}")


class _Member:
    """One ensemble member's graph and decoder state."""

    def __init__(self, model: Model, batch: Batch):
        self.model = model
        self.g = model.graph(inference=True)
        self.state = model.start_state(self.g, batch_view(batch, len(model.encoders)))

    def advance(self, inputs: np.ndarray) -> np.ndarray:
        self.state = self.model.step(self.g, self.state, inputs[:, None])
        lp = ops.log_softmax(self.state.logits)
        return self.g.value(lp)[:, 0, :].astype(np.float64)

    def select(self, rows) -> None:
        self.state = self.state.select(rows)


def _top_candidates(scores: np.ndarray, prefixes: list[tuple[int, ...]], k: int):
    """The ``k`` best (row, token) pairs by score, ties by token sequence."""
    flat = scores.reshape(-1)
    k = min(k, flat.size)
    kth = np.partition(flat, flat.size - k)[flat.size - k]
    cand = np.nonzero(flat >= kth)[0]
    V = scores.shape[1]
    keyed = sorted(cand.tolist(), key=lambda i: (-flat[i], prefixes[i // V] + (i % V,)))
    return [(i // V, i % V) for i in keyed[:k]]


def beam_search(models: Sequence[Model], batch: Batch, beam_size: int = 5,
                max_len_factor: float = 2.0, alpha: float = 0.6, n_best: int | None = None,
                max_length: int | None = None) -> list[list[Hypothesis]]:
    """Decode every sentence of ``batch``; returns ranked hypotheses in batch order.

    All sentences advance together; each model takes one ``step`` per position
    over every live hypothesis. The ensemble score is the mean of the members'
    log-probabilities. Finished hypotheses leave the beam, shrinking it.
    Hypotheses that reach the length limit without ``</s>`` are kept with
    ``finished=False``.
    """
    check_ensemble(models)
    if beam_size < 1:
        raise ContractError("beam size must be at least 1")
    n_best = n_best or beam_size
    b = batch.size
    if batch.sources:
        src_len = batch.source_masks[0].sum(axis=1).astype(int) - 1
    else:
        src_len = np.zeros(b, dtype=int)
    if max_length is not None:
        limits = np.full(b, max_length)
    elif batch.sources:
        limits = np.maximum(np.floor(max_len_factor * src_len).astype(int), 1)
    else:
        limits = np.full(b, 50)

    results: list[list[Hypothesis]] = [[] for _ in range(b)]
    active = [i for i in range(b) if not batch.sources or src_len[i] > 0]
    for i in set(range(b)) - set(active):
        results[i] = [Hypothesis((), 0.0, tuple(0.0 for _ in models), True, 0.0)]
    if not active:
        return results

    members = [_Member(m, batch) for m in models]
    rows = np.array(active)
    for mem in members:
        mem.select(rows)
    # live hypotheses, row-aligned with the decoder states
    live_sent = list(active)
    live_tokens: list[tuple[int, ...]] = [() for _ in active]
    live_score = np.zeros(len(active))
    live_models = np.zeros((len(active), len(models)))
    width = {i: beam_size for i in active}

    while live_sent:
        inputs = np.array([t[-1] if t else -1 for t in live_tokens], dtype=np.int64)
        per_model = np.stack([mem.advance(inputs) for mem in members])  # [m, n, V]
        step_lp = per_model.mean(axis=0)
        total = live_score[:, None] + step_lp

        next_rows, next_tokens, next_score, next_models, next_sent = [], [], [], [], []
        for sent in dict.fromkeys(live_sent):
            idx = [r for r, s in enumerate(live_sent) if s == sent]
            picks = _top_candidates(total[idx], [live_tokens[r] for r in idx], width[sent])
            for local, tok in picks:
                r = idx[local]
                tokens = live_tokens[r] + (tok,)
                score = float(total[r, tok])
                mscores = live_models[r] + per_model[:, r, tok]
                done = tok == EOS_ID
                if done or len(tokens) >= limits[sent]:
                    results[sent].append(Hypothesis(tokens, score, tuple(mscores.tolist()), done,
                                                    normalize(score, len(tokens), alpha)))
                    width[sent] -= 1
                else:
                    next_rows.append(r)
                    next_tokens.append(tokens)
                    next_score.append(score)
                    next_models.append(mscores)
                    next_sent.append(sent)
        if not next_rows:
            break
        for mem in members:
            mem.select(next_rows)
        live_sent, live_tokens = next_sent, next_tokens
        live_score = np.array(next_score)
        live_models = np.array(next_models)

    return [sorted(r, key=_rank_key)[:n_best] for r in results]


def greedy_search(model: Model, batch: Batch, max_length: int | None = None,
                  max_len_factor: float = 2.0) -> list[tuple[int, ...]]:
    """Plain argmax decoding, one sentence at a time (the beam-1 oracle)."""
    out = []
    for i in range(batch.size):
        one = batch.subset([i])
        n = max_length or (max(int(max_len_factor * (one.source_masks[0].sum() - 1)), 1)
                           if one.sources else 50)
        if one.sources and one.source_masks[0].sum() <= 1:
            out.append(())
            continue
        mem = _Member(model, one)
        tokens: tuple[int, ...] = ()
        while len(tokens) < n:
            lp = mem.advance(np.array([tokens[-1] if tokens else -1]))
            tokens += (int(np.argmax(lp[0])),)
            if tokens[-1] == EOS_ID:
                break
        out.append(tokens)
    return out


# -- scoring -----------------------------------------------------------------

def score_batch(model: Model, batch: Batch) -> np.ndarray:
    """Per-token log-probs ``[b, t]`` (zero on padding) under teacher forcing."""
    g = model.graph(inference=True)
    return model.token_logprobs(g, batch_view(batch, len(model.encoders)))


def score(model: Model, sources: Sequence[Sequence[Sequence[int]]], targets: Sequence[Sequence[int]],
          batch_size: int = 64) -> list[tuple[float, list[float]]]:
    """Total and per-token log-probs (``</s>`` included) for each pair, in input order."""
    n = len(targets)
    if any(len(s) != n for s in sources):
        raise DataError(f"{[len(s) for s in sources]} source lines vs {n} target lines")
    n_src = len(model.encoders)
    out: list[tuple[float, list[float]]] = [None] * n  # type: ignore[list-item]
    order = sorted(range(n), key=lambda i: (len(targets[i]), i))
    for start in range(0, n, batch_size):
        ids = order[start:start + batch_size]
        streams = [[s[i] for i in ids] for s in sources[:n_src]] + [[targets[i] for i in ids]]
        batch = make_batch(streams, n_src, ids)
        lp = score_batch(model, batch)
        for row, i in enumerate(ids):
            per = lp[row, :len(targets[i]) + 1].astype(np.float64).tolist()
            out[i] = (float(np.sum(per)), per)
    return out


def rescore(nbest: Sequence[Sequence[NBestEntry]], scorers, sources, vocab: Vocabulary,
            weights: Sequence[float] | None = None, batch_size: int = 64,
            alpha: float = 0.6) -> list[list[NBestEntry]]:
    """Add one feature per scorer and re-rank by the weighted sum.

    ``scorers`` is a list of ``(name, model, direction)``; R2L scorers see the
    hypothesis reversed. Features hold cumulative log-probs; they enter the
    total length-normalised with ``alpha`` (end token counted), like the
    incoming total from the search. ``weights[0]`` multiplies the incoming
    total, the rest the new features; all default to 1.
    """
    weights = list(weights) if weights is not None else [1.0] * (len(scorers) + 1)
    if len(weights) != len(scorers) + 1:
        raise ContractError(f"need {len(scorers) + 1} weights, got {len(weights)}")
    flat = [(s, k) for s, entries in enumerate(nbest) for k in range(len(entries))]
    for s, entries in enumerate(nbest):
        if not entries:
            raise DataError(f"empty n-best entry for sentence {s}")
    new = [[replace(e, features=dict(e.features)) for e in entries] for entries in nbest]
    for name, model, direction in scorers:
        tgts, srcs = [], [[] for _ in sources]
        for s, k in flat:
            ids = vocab.encode(new[s][k].tokens)
            tgts.append(invert_r2l(ids) if direction == "r2l" else ids)
            for j, stream in enumerate(sources):
                srcs[j].append(stream[new[s][k].sentence])
        for (s, k), (total, _) in zip(flat, score(model, srcs, tgts, batch_size)):
            new[s][k].features[name] = total
    names = [name for name, _, _ in scorers]
    for entries in new:
        for e in entries:
            n_tok = len(e.tokens) + 1
            e.total = weights[0] * e.total + sum(w * normalize(e.features[n], n_tok, alpha)
                                                 for w, n in zip(weights[1:], names))
        entries.sort(key=lambda e: (-e.total, e.tokens))
    return new


# -- n-best IO ---------------------------------------------------------------

def format_nbest(entry: NBestEntry) -> str:
    feats = " ".join(f"{k}={v:.6f}" for k, v in entry.features.items())
    return f"{entry.sentence} ||| {' '.join(entry.tokens)} ||| {feats} ||| {entry.total:.6f}"


def parse_nbest(lines: Sequence[str]) -> list[list[NBestEntry]]:
    grouped: dict[int, list[NBestEntry]] = {}
    for n, line in enumerate(lines, 1):
        parts = line.split(" ||| ")
        if len(parts) != 4:
            raise DataError(f"n-best line {n}: expected 4 fields, got {len(parts)}")
        try:
            sid = int(parts[0])
            feats = {}
            for item in parts[2].split():
                k, v = item.rsplit("=", 1)
                feats[k] = float(v)
            total = float(parts[3])
        except ValueError as exc:
            raise DataError(f"n-best line {n}: {exc}") from None
        grouped.setdefault(sid, []).append(NBestEntry(sid, parts[1].split(), feats, total))
    if not grouped:
        return []
    return [grouped.get(i, []) for i in range(max(grouped) + 1)]


# -- file translation --------------------------------------------------------

def hypotheses_to_entries(sent: int, hyps: Sequence[Hypothesis], vocab: Vocabulary,
                          reverse: bool = False) -> list[NBestEntry]:
    out = []
    for h in hyps:
        words = vocab.decode(h.words, strip_eos=False)
        if reverse:
            words = invert_r2l(words)
        feats = {f"F{k}": s for k, s in enumerate(h.model_scores)}
        out.append(NBestEntry(sent, words, feats, h.normalized))
    return out


def _chunks(order, lengths, batch_size, batch_tokens):
    """Consecutive groups of at most ``batch_size`` sentences and, when
    ``batch_tokens`` is set, at most that many padded source slots."""
    cur: list[int] = []
    longest = 0
    for i in order:
        width = max(longest, lengths[i] + 1)
        if cur and (len(cur) >= batch_size or (batch_tokens and (len(cur) + 1) * width > batch_tokens)):
            yield cur
            cur, width = [], lengths[i] + 1
        cur.append(i)
        longest = width
    if cur:
        yield cur


def translate_lines(models: Sequence[Model], source_lines: Sequence[Sequence[str]],
                    src_vocabs: Sequence[Vocabulary], trg_vocab: Vocabulary, beam_size: int = 5,
                    n_best: int | None = None, batch_size: int = 64, alpha: float = 0.6,
                    max_len_factor: float = 2.0, max_length: int | None = None,
                    batch_tokens: int = 0):
    """Translate sentence-aligned source streams; returns (n-best lists in input order, stats)."""
    check_ensemble(models)
    directions = {m.config.direction for m in models}
    if len(directions) != 1:
        raise ContractError("cannot ensemble left-to-right and right-to-left models in one search")
    reverse = directions == {"r2l"}
    n = len(source_lines[0]) if source_lines else 0
    if any(len(s) != n for s in source_lines):
        raise DataError("source files have different line counts")
    streams = [[v.encode(line) for line in lines] for v, lines in zip(src_vocabs, source_lines)]
    order = sorted(range(n), key=lambda i: (len(streams[0][i]) if streams else 0, i))
    results: list[list[NBestEntry]] = [None] * n  # type: ignore[list-item]
    t0 = time.perf_counter()
    for ids in _chunks(order, [len(s) for s in streams[0]] if streams else [0] * n,
                       batch_size, batch_tokens):
        batch = make_batch([[s[i] for i in ids] for s in streams], len(streams), ids)
        hyps = beam_search(models, batch, beam_size, max_len_factor, alpha, n_best, max_length)
        for i, h in zip(ids, hyps):
            results[i] = hypotheses_to_entries(i, h, trg_vocab, reverse)
    seconds = time.perf_counter() - t0
    words = sum(len(s) for s in streams[0]) if streams else 0
    stats = {"sentences": n, "seconds": seconds, "source_tokens": words,
             "tokens_per_second": words / seconds if seconds > 0 else 0.0}
    return results, stats


def translate_file(models: Sequence[Model], inputs: Sequence, output, src_vocabs, trg_vocab,
                   n_best: int | None = None, **kwargs) -> dict:
    """Translate files line by line; writes 1-best lines, or the n-best format when ``n_best``."""
    lines = [read_lines(p) for p in inputs]
    results, stats = translate_lines(models, lines, src_vocabs, trg_vocab, n_best=n_best, **kwargs)
    with open(output, "w", encoding="utf-8") as f:
        for entries in results:
            if n_best:
                for e in entries:
                    f.write(format_nbest(e) + "\n")
            else:
                f.write(" ".join(entries[0].tokens) + "\n")
    log.info("translated %d sentences in %.2f s (%.1f source tokens/s)",
             stats["sentences"], stats["seconds"], stats["tokens_per_second"])
    return stats
