"""Toy end-to-end recipe driven through the command line.

Synthetic "German" (verb-final) to "English" (verb-second) data; steps:
vocab, shallow back-translation model, back-translate monolingual English,
concatenate, two left-to-right and two right-to-left deep models, ensemble
n-best decoding, right-to-left rescoring, BLEU report.

Run with ``python -m mtk.recipe --workdir DIR``.
"""
from __future__ import annotations

import argparse
import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from .data import corpus_bleu, read_lines

NOUNS = [("hund", "dog"), ("katze", "cat"), ("mann", "man"), ("frau", "woman"), ("kind", "child"),
         ("vogel", "bird"), ("lehrer", "teacher"), ("arzt", "doctor"), ("bauer", "farmer"),
         ("koch", "cook"), ("fisch", "fish"), ("pferd", "horse")]
VERBS = [("sieht", "sees"), ("hoert", "hears"), ("ruft", "calls"), ("sucht", "seeks"),
         ("findet", "finds"), ("mag", "likes"), ("fragt", "asks"), ("kennt", "knows")]
ADJS = [("grosse", "big"), ("kleine", "small"), ("alte", "old"), ("junge", "young"),
        ("rote", "red"), ("schnelle", "fast")]
ADVS = [("heute", "today"), ("oft", "often"), ("nie", "never"), ("gern", "gladly")]


def _noun_phrase(rng):
    noun = NOUNS[rng.integers(len(NOUNS))]
    de, en = ["der"], ["the"]
    if rng.random() < 0.5:
        adj = ADJS[rng.integers(len(ADJS))]
        de.append(adj[0])
        en.append(adj[1])
    return de + [noun[0]], en + [noun[1]]


def sentence_pair(rng):
    """Subordinate-clause German (``dass S O [adv] V``) and plain English (``S V O [adv]``)."""
    s_de, s_en = _noun_phrase(rng)
    o_de, o_en = _noun_phrase(rng)
    verb = VERBS[rng.integers(len(VERBS))]
    adv = ADVS[rng.integers(len(ADVS))] if rng.random() < 0.4 else None
    de = ["dass"] + s_de + o_de + ([adv[0]] if adv else []) + [verb[0]]
    en = s_en + [verb[1]] + o_en + ([adv[1]] if adv else [])
    return " ".join(de), " ".join(en)


def generate(workdir: Path, seed: int = 7, n_train: int = 1500, n_mono: int = 1500,
             n_test: int = 100) -> None:
    rng = np.random.default_rng(seed)

    def pairs(n):
        return [sentence_pair(rng) for _ in range(n)]

    def write(name, lines):
        (workdir / name).write_text("".join(line + "\n" for line in lines), encoding="utf-8")

    train = pairs(n_train)
    write("train.de", [d for d, _ in train])
    write("train.en", [e for _, e in train])
    write("mono.en", [e for _, e in pairs(n_mono)])
    test = pairs(n_test)
    write("test.de", [d for d, _ in test])
    write("test.en", [e for _, e in test])


def _mtk(*args, log=None):
    cmd = [sys.executable, "-m", "mtk", "--quiet", *map(str, args)]
    if log:
        log(" ".join(cmd[2:]))
    proc = subprocess.run(cmd, capture_output=True, text=True)
    if proc.returncode != 0:
        raise RuntimeError(f"step failed ({proc.returncode}): {' '.join(cmd)}\n{proc.stderr}")
    return proc


def run(workdir, quick: bool = False, log=print) -> dict:
    """Run every step in ``workdir``; returns the BLEU scores and timings."""
    wd = Path(workdir)
    wd.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    generate(wd, n_train=600 if quick else 1500, n_mono=600 if quick else 1500,
             n_test=40 if quick else 100)
    f = lambda name: wd / name  # noqa: E731
    vocab = f("vocab.txt")
    _mtk("vocab", "--corpus", f("train.de"), f("train.en"), f("mono.en"), "--output", vocab, log=log)

    common = ["--vocabs", vocab, vocab, "--dim-emb", 32, "--dim-rnn", 48, "--mini-batch-tokens", 800,
              "--learning-rate", 0.003, "--lr-warmup", 50, "--log-every", 50]

    # 1. shallow English->German model for back-translation (asynchronous updates)
    _mtk("train", "--model", f("bt.mtk"), "--type", "s2s-shallow",
         "--train-sets", f("train.en"), f("train.de"), "--epochs", 3 if quick else 6,
         "--async", "--workers", 2, "--seed", 11, *common, log=log)
    _mtk("translate", "--models", f("bt.mtk"), "--vocabs", vocab, vocab, "--input", f("mono.en"),
         "--output", f("mono.de"), "--beam-size", 5, log=log)

    # 2. original data twice plus the synthetic pairs
    de = read_lines(f("train.de")) * 2 + read_lines(f("mono.de"))
    en = read_lines(f("train.en")) * 2 + read_lines(f("mono.en"))
    keep = [i for i, line in enumerate(de) if line.strip()]
    f("all.de").write_text("".join(de[i] + "\n" for i in keep), encoding="utf-8")
    f("all.en").write_text("".join(en[i] + "\n" for i in keep), encoding="utf-8")

    # 3. two left-to-right and two right-to-left deep models
    epochs = 1 if quick else 2
    models = {}
    for name, seed, r2l in (("l2r1", 1, False), ("l2r2", 2, False), ("r2l1", 3, True), ("r2l2", 4, True)):
        models[name] = f(f"{name}.mtk")
        _mtk("train", "--model", models[name], "--type", "s2s-deep", "--enc-depth", 2, "--dec-depth", 4,
             "--train-sets", f("all.de"), f("all.en"), "--epochs", epochs, "--seed", seed,
             "--right-left", "true" if r2l else "false", *common, log=log)

    # 4. single model, ensemble n-best, rescoring (the ensemble total is a mean over two
    #    models, so each R2L model gets half weight and all four count equally)
    _mtk("translate", "--models", models["l2r1"], "--vocabs", vocab, vocab, "--input", f("test.de"),
         "--output", f("single.out"), log=log)
    _mtk("translate", "--models", models["l2r1"], models["l2r2"], "--vocabs", vocab, vocab,
         "--input", f("test.de"), "--n-best", 12, "--output", f("ensemble.nbest"), log=log)
    _mtk("rescore", "--nbest", f("ensemble.nbest"), "--models", models["r2l1"], models["r2l2"],
         "--vocabs", vocab, vocab, "--input", f("test.de"), "--output", f("rescored.nbest"),
         "--output-best", f("rescored.out"), "--weights", 1, 0.5, 0.5, log=log)

    refs = read_lines(f("test.en"))
    nbest_first = {}
    for line in read_lines(f("ensemble.nbest")):
        sid, toks = line.split(" ||| ")[:2]
        nbest_first.setdefault(int(sid), toks)
    ensemble = [nbest_first.get(i, "") for i in range(len(refs))]
    result = {
        "bleu_single": corpus_bleu(read_lines(f("single.out")), refs),
        "bleu_ensemble": corpus_bleu(ensemble, refs),
        "bleu_rescored": corpus_bleu(read_lines(f("rescored.out")), refs),
        "seconds": time.perf_counter() - t0,
    }
    (wd / "report.json").write_text(json.dumps(result, indent=2) + "\n")
    return result


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="python -m mtk.recipe", description=__doc__.split("\n")[0])
    parser.add_argument("--workdir", required=True, help="directory for corpora, models and outputs")
    parser.add_argument("--quick", action="store_true", help="smaller data and fewer epochs")
    args = parser.parse_args(argv)
    res = run(args.workdir, args.quick, log=lambda s: print(f"+ {s}", file=sys.stderr))
    print(f"single model BLEU           {res['bleu_single']:.2f}")
    print(f"ensemble BLEU               {res['bleu_ensemble']:.2f}")
    print(f"ensemble + R2L rescored     {res['bleu_rescored']:.2f}")
    print(f"total time                  {res['seconds']:.1f} s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
