"""Acceptance suite: one test per criterion.

Each test records ``PASS``/``FAIL``/``SKIP`` with a short detail in
``RESULTS``; ``conftest.py`` prints one line per criterion at the end of
the run.  Run on its own with ``pytest tests/test_acceptance.py -v``.
"""
import os
import time

import numpy as np
import pytest

from mtk.data import Vocabulary, make_batch
from mtk.models import ARCHITECTURES, ModelConfig, build_model
from mtk.modelio import load_model, save_model
from mtk.search import beam_search, greedy_search, translate_lines
from mtk.training import TrainConfig, Trainer, lr_at, train_sync

import test_gradients as tg
from helpers import gradcheck
from test_models import SOURCES, one_shot_logprobs, random_batch, small_config, stepwise_logprobs
from test_search import exhaustive_best, random_sources, toy_model
from test_training import cfg, copy_corpus, params_equal, tiny

RESULTS: dict[int, tuple[str, str]] = {}


class Criterion:
    """Context manager: records PASS on a clean exit, FAIL on an exception."""

    def __init__(self, number):
        self.number = number
        self.detail = ""

    def __enter__(self):
        return self

    def __exit__(self, kind, exc, tb):
        if kind is None:
            RESULTS[self.number] = ("PASS", self.detail)
        elif issubclass(kind, pytest.skip.Exception):
            RESULTS[self.number] = ("SKIP", str(exc))
        else:
            RESULTS[self.number] = ("FAIL", f"{self.detail} ({kind.__name__}: {str(exc).splitlines()[0] if str(exc) else ''})".strip())
        return False


# -- 1. gradient suite -------------------------------------------------------

def test_c01_gradient_suite():
    with Criterion(1) as c:
        t0 = time.perf_counter()
        worst = {}
        for name, (factory, build) in tg.CASES.items():
            errs = []
            for seed in range(tg.N_INSTANCES):
                arrays = factory(np.random.default_rng(seed))
                errs.append(gradcheck(lambda g, p: tg.weighted(g, build(g, p), 1000 + seed), arrays))
            worst[name] = max(errs)
        elapsed = time.perf_counter() - t0
        name = max(worst, key=worst.get)
        c.detail = (f"{len(worst)} ops x {tg.N_INSTANCES} instances, worst {name} "
                    f"{worst[name]:.1e}, {elapsed:.0f} s")
        assert worst[name] < 1e-4
        assert elapsed < 120


# -- 2. fusion equivalence ---------------------------------------------------

def test_c02_fusion_equivalence():
    with Criterion(2) as c:
        n = 0
        for seed in range(10):
            for with_x in (True, False):
                for ln in (True, False):
                    tg.test_gru_fused_matches_unfused(seed, with_x, ln)
                    n += 1
            tg.test_layer_norm_fused_matches_unfused(seed)
            tg.test_cross_entropy_fused_matches_unfused(seed)
            n += 2
        c.detail = f"gru_cell, layer_norm, cross_entropy: {n} value+gradient comparisons within 1e-5"


# -- 3. framework equivalence ------------------------------------------------

def test_c03_step_equals_one_shot():
    with Criterion(3) as c:
        worst = {}
        for arch in ARCHITECTURES:
            for dtype in ("float64", "float32"):
                model = build_model(small_config(arch, dtype=dtype))
                batch = random_batch(np.random.default_rng(0), SOURCES.get(arch, 1))
                diff = np.abs(one_shot_logprobs(model, batch) - stepwise_logprobs(model, batch))
                worst[f"{arch}/{dtype}"] = float(diff.max())
        key = max(worst, key=worst.get)
        c.detail = f"{len(ARCHITECTURES)} models, worst {key} {worst[key]:.1e}"
        assert worst[key] <= 1e-5


# -- 4. beam oracle ----------------------------------------------------------

def test_c04_beam_oracle():
    with Criterion(4) as c:
        misses = {}
        for arch in ("s2s-shallow", "transformer"):
            misses[arch] = 0
            for seed in range(100):
                model = toy_model(arch, seed=seed)
                src = [int(x) for x in np.random.default_rng(seed).integers(1, 5, size=3)]
                hyp = beam_search([model], make_batch([[src]], 1), beam_size=5, alpha=0.0,
                                  max_length=4)[0][0]
                best, val = exhaustive_best(model, src, 5, 4)
                if hyp.tokens != best or abs(hyp.score - val) > 1e-9:
                    misses[arch] += 1

        greedy_ok = True
        for arch in ("s2s-shallow", "transformer", "dual-source", "hard-attention"):
            model = build_model(small_config(arch))
            n = SOURCES.get(arch, 1)
            rng = np.random.default_rng(1)
            batch = make_batch([random_sources(rng, 6) for _ in range(n)], n)
            beam = [h[0].tokens for h in beam_search([model], batch, beam_size=1, alpha=0.0)]
            greedy_ok &= beam == greedy_search(model, batch)

        model = build_model(small_config("s2s-shallow"))
        batch = make_batch([random_sources(np.random.default_rng(2), 8)], 1)
        single = beam_search([model], batch, beam_size=4)
        double = beam_search([model, model], batch, beam_size=4)
        ensemble_ok = all([h.tokens for h in a] == [h.tokens for h in b] for a, b in zip(single, double))

        c.detail = (f"oracle misses {misses} over 100 models each; beam-1==greedy {greedy_ok}; "
                    f"ensemble==single {ensemble_ok}")
        assert not any(misses.values())
        assert greedy_ok and ensemble_ok


# -- 5. copy / reverse -------------------------------------------------------

def _seq_task(rng, n, reverse):
    src = [[int(x) for x in rng.integers(2, 12, size=rng.integers(3, 11))] for _ in range(n)]
    return src, [s[::-1] if reverse else list(s) for s in src]


def _token_accuracy(model, src, tgt):
    hyps = []
    for i in range(0, len(src), 100):
        hyps += greedy_search(model, make_batch([src[i:i + 100]], 1))
    good = total = 0
    for h, t in zip(hyps, tgt):
        ref = t + [0]
        total += len(ref)
        good += sum(j < len(h) and h[j] == r for j, r in enumerate(ref))
    return good / total


def _copy_reverse(arch, reverse):
    rng = np.random.default_rng(0)
    src, tgt = _seq_task(rng, 5000, reverse)
    test_src, test_tgt = _seq_task(rng, 200, reverse)
    model = build_model(ModelConfig(type=arch, vocab_sizes=[12, 12], dim_emb=32, dim_rnn=64,
                                    heads=4, dropout=0.0))
    trace = []

    def epoch_end(trainer):
        trace.append(_token_accuracy(model, test_src, test_tgt))
        return trace[-1] >= 0.99

    t0 = time.perf_counter()
    Trainer(model, TrainConfig(lr=0.003, warmup=100, mini_batch_tokens=1000, epochs=10,
                               log_every=1000)).train([src, tgt], 1, epoch_end=epoch_end)
    return trace, time.perf_counter() - t0


def test_c05_copy_and_reverse():
    with Criterion(5) as c:
        parts, ok = [], True
        for arch in ("s2s-deep", "transformer"):
            for task in ("copy", "reverse"):
                trace, secs = _copy_reverse(arch, task == "reverse")
                parts.append(f"{arch}/{task} {trace[-1]:.1%} after {len(trace)} ep in {secs:.0f} s")
                ok &= trace[-1] >= 0.99 and secs < 300
                c.detail = "; ".join(parts)
        assert ok


# -- 6. dual-source APE ------------------------------------------------------

def _ape_corpus(rng, n):
    """src: random tokens; pe: a fixed token mapping of src; mt: pe minus one token."""
    src = [[int(x) for x in rng.integers(2, 12, size=rng.integers(3, 11))] for _ in range(n)]
    pe = [[(t + 3) % 10 + 2 for t in s] for s in src]
    mt = []
    for p in pe:
        k = int(rng.integers(len(p)))
        mt.append(p[:k] + p[k + 1:])
    return mt, src, pe


def _exact_match(arch, train, test, epochs=4):
    n_sources = 2 if arch == "dual-source" else 1
    mt, src, pe = train
    streams = [mt, src, pe] if n_sources == 2 else [mt, pe]
    model = build_model(ModelConfig(type=arch, vocab_sizes=[12] * (n_sources + 1), dim_emb=32,
                                    dim_rnn=64, dropout=0.0))
    # the budget counts every stream, so scale it to keep sentences per update equal
    budget = 1000 * (n_sources + 1) // 2
    trainer = Trainer(model, TrainConfig(lr=0.003, warmup=100, mini_batch_tokens=budget,
                                         epochs=epochs, log_every=1000))
    trainer.train(streams, n_sources)
    inputs = [test[0], test[1]] if n_sources == 2 else [test[0]]
    hyps = greedy_search(model, make_batch(inputs, n_sources))
    return float(np.mean([list(h) == t + [0] for h, t in zip(hyps, test[2])])), trainer.update


def test_c06_dual_source_recovers_deleted_words():
    with Criterion(6) as c:
        rng = np.random.default_rng(0)
        train, test = _ape_corpus(rng, 3000), _ape_corpus(rng, 200)
        dual, u_dual = _exact_match("dual-source", train, test)
        base, u_base = _exact_match("s2s-shallow", train, test)
        c.detail = (f"dual-source {dual:.1%} ({u_dual} updates) vs mt-only {base:.1%} "
                    f"({u_base} updates), gap {100 * (dual - base):.1f} points")
        assert dual - base >= 0.20


# -- 7. data parallelism -----------------------------------------------------

def test_c07a_sync_four_workers_equal_one():
    with Criterion(7) as c:
        data = copy_corpus()
        one, four = tiny(), tiny()
        train_sync(one, data, 1, cfg(max_updates=50, workers=1))
        t4 = train_sync(four, data, 1, cfg(max_updates=50, workers=4, processes=True))
        worst = max(float(np.abs(one.params[k] - four.params[k]).max()) for k in one.params)
        c.detail = f"{t4.update} updates, max |w4 - w1| = {worst:.1e}"
        assert t4.update == 50 and worst <= 1e-6


def _updates_per_second(workers, updates=20):
    """Fixed token budget per update, so updates/s is proportional to tokens/s."""
    data = copy_corpus(n=4000)
    model = build_model(ModelConfig(type="s2s-shallow", vocab_sizes=[12, 12], dim_emb=64,
                                    dim_rnn=128, dropout=0.0))
    t0 = time.perf_counter()
    train_sync(model, data, 1, TrainConfig(lr=0.001, warmup=10, mini_batch_tokens=4000,
                                           max_updates=updates, workers=workers,
                                           log_every=1000, epochs=100))
    return updates / (time.perf_counter() - t0)


def test_c07b_throughput_scales_with_workers():
    cores = os.cpu_count() or 1
    if cores < 4:
        prev = RESULTS.get(7, ("FAIL", ""))
        RESULTS[7] = (prev[0], prev[1] + f"; throughput part SKIPPED: host has {cores} core(s), needs >= 4")
        pytest.skip(f"throughput trend needs a >= 4-core host, this one has {cores}")
    rates = [_updates_per_second(w) for w in (1, 2, 4)]
    prev = RESULTS.get(7, ("FAIL", ""))
    ok = rates[0] < rates[1] < rates[2]
    RESULTS[7] = ("PASS" if ok and prev[0] == "PASS" else "FAIL",
                  prev[1] + "; updates/s for 1, 2, 4 workers: " + ", ".join(f"{r:.2f}" for r in rates))
    assert ok


# -- 8. recipe ---------------------------------------------------------------

def test_c08_recipe(tmp_path):
    from mtk.recipe import run
    with Criterion(8) as c:
        res = run(tmp_path / "recipe", log=None)
        c.detail = (f"BLEU single {res['bleu_single']:.2f}, ensemble {res['bleu_ensemble']:.2f}, "
                    f"ensemble+R2L {res['bleu_rescored']:.2f}, {res['seconds']:.0f} s")
        assert res["bleu_rescored"] >= res["bleu_single"]


# -- 9. learning-rate schedule -----------------------------------------------

def test_c09_lr_schedule_exact():
    with Criterion(9) as c:
        got = [lr_at(0), lr_at(16000), lr_at(64000)]
        c.detail = f"lr(0), lr(16000), lr(64000) = {got}"
        assert got == [0.0, 0.0003, 0.00015]


# -- 10. determinism and persistence -----------------------------------------

def test_c10_determinism_and_persistence(tmp_path):
    with Criterion(10) as c:
        data = copy_corpus()
        checks = {}

        a, b = tiny(dropout=0.1), tiny(dropout=0.1)
        ta = train_sync(a, data, 1, cfg(max_updates=100, epochs=10))
        tb = train_sync(b, data, 1, cfg(max_updates=100, epochs=10))
        checks["seeded training"] = params_equal(a.params, b.params) and ta.losses == tb.losses

        half = tiny(dropout=0.1)
        ckpt = tmp_path / "half.mtk"
        train_sync(half, data, 1, cfg(max_updates=50, epochs=10), checkpoint_path=ckpt)
        resumed = Trainer.resume(ckpt, cfg(max_updates=100, epochs=10))
        resumed.train(data, 1)
        checks["checkpoint resume"] = (params_equal(a.params, resumed.model.params)
                                       and params_equal(ta.average, resumed.average)
                                       and params_equal(ta.adam.m, resumed.adam.m)
                                       and params_equal(ta.adam.v, resumed.adam.v))

        path = tmp_path / "model.mtk"
        save_model(a, path)
        loaded, _, _ = load_model(path)
        checks["model file round trip"] = (loaded.config == a.config
                                           and loaded.params.keys() == a.params.keys()
                                           and params_equal(a.params, loaded.params))

        vocab = Vocabulary(["</s>", "<unk>"] + [f"w{i}" for i in range(10)])
        rng = np.random.default_rng(6)
        lines = [" ".join(vocab.token(t) for t in s) for s in random_sources(rng, 40)]
        runs = [translate_lines([a], [lines], [vocab], vocab, beam_size=3, batch_size=bs,
                                batch_tokens=bt)[0] for bs, bt in ((1, 0), (7, 0), (64, 0), (64, 50))]
        # identical output; float32 scores only move with BLAS blocking (about 1e-7)
        checks["batching-invariant translation"] = all(
            [e[0].tokens for e in r] == [e[0].tokens for e in runs[0]]
            and np.allclose([e[0].total for e in r], [e[0].total for e in runs[0]], atol=1e-5)
            for r in runs)

        c.detail = ", ".join(f"{k} {'ok' if v else 'MISMATCH'}" for k, v in checks.items())
        assert all(checks.values())
