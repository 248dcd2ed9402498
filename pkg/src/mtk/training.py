"""Adam, the learning-rate schedule, parameter averaging and data-parallel training.

Synchronous training splits every batch across ``workers`` forked processes
that share the parameters through shared memory; their gradients are summed in
worker order and one Adam step is applied, so ``w`` workers compute the same
update as one worker on the whole batch. Asynchronous training runs worker
threads against a copy-on-write parameter store whose entries are swapped
whole, so a reader never sees a half-written tensor.
"""
from __future__ import annotations

import ctypes
import dataclasses
import logging
import math
import multiprocessing as mp
import threading
import time
import zlib
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .data import Batch, make_batches, prefetch
from .errors import ContractError, MtkError, NumericError
from .framework import Model
from .modelio import load_model, save_model

log = logging.getLogger(__name__)


# -- schedule, optimizer, averaging ----------------------------------------

def lr_at(step: int, base: float = 0.0003, warmup: int = 16000) -> float:
    """Linear warmup from 0 to ``base`` over ``warmup`` updates, then inverse-sqrt decay."""
    if step < 0:
        raise ContractError("step must be non-negative")
    if warmup <= 0:
        return base
    if step <= warmup:
        return base * (step / warmup)
    return base * math.sqrt(warmup / step)


@dataclass
class LrSchedule:
    base: float = 0.0003
    warmup: int = 16000

    def __call__(self, step: int) -> float:
        return lr_at(step, self.base, self.warmup)


def adam_defaults(config) -> tuple[float, float, float]:
    """(beta1, beta2, eps): transformer settings for transformer decoders, else the usual ones."""
    if getattr(config, "decoder", "") == "transformer" or getattr(config, "type", "") == "transformer":
        return 0.9, 0.98, 1e-9
    return 0.9, 0.999, 1e-8


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0

    @classmethod
    def create(cls, params: Mapping[str, np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8):
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, beta1, beta2, eps)


def check_finite(grads: Mapping[str, np.ndarray]) -> None:
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name!r}; update aborted")


def adam_update(name, p, g, state: AdamState, lr) -> np.ndarray:
    """New value of parameter ``name`` (moments are updated in place)."""
    m, v = state.m[name], state.v[name]
    m *= state.beta1
    m += (1 - state.beta1) * g
    v *= state.beta2
    v += (1 - state.beta2) * (g * g)
    m_hat = m / (1 - state.beta1 ** state.t)
    v_hat = v / (1 - state.beta2 ** state.t)
    return p - lr * m_hat / (np.sqrt(v_hat) + state.eps)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState, lr: float) -> None:
    """Bias-corrected Adam, in place; gradients are zeroed afterwards."""
    check_finite(grads)
    state.t += 1
    for name, p in params.items():
        p[...] = adam_update(name, p, grads[name], state, lr)
    for g in grads.values():
        g.fill(0)


def update_average(avg: Mapping[str, np.ndarray], params: Mapping[str, np.ndarray], beta: float) -> None:
    for name, a in avg.items():
        a *= beta
        a += (1 - beta) * params[name]


def clip_by_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        for g in grads.values():
            g *= max_norm / norm
    return norm


# -- gradients ---------------------------------------------------------------

def step_seed(seed: int, update: int, part: int) -> int:
    """Dropout seed of one worker's share of one update."""
    return int(np.random.SeedSequence([seed, 0, update, part]).generate_state(1)[0])


def epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, 1, epoch]).generate_state(1)[0])


def batch_gradients(model: Model, batch: Batch, normalizer: float, seed: int,
                    params: Mapping[str, np.ndarray] | None = None):
    """Loss ``sum(CE) / normalizer`` on ``batch`` and its parameter gradients."""
    g = model.graph(seed=seed, params=params)
    loss = model.loss(g, batch, normalizer=normalizer)
    g.backward(loss)
    return float(g.value(loss)[0]), g.param_grads()


def validation_loss(model: Model, batches: Sequence[Batch], params=None) -> float:
    """Mean per-token cross-entropy (no dropout)."""
    total = words = 0.0
    for b in batches:
        g = model.graph(inference=True, params=params)
        total += float(g.value(model.loss(g, b, normalizer=1.0))[0])
        words += b.target_words
    return total / max(words, 1.0)


# -- configuration -------------------------------------------------------------

@dataclass
class TrainConfig:
    lr: float = 0.0003
    warmup: int = 16000
    beta1: float = 0.0  # 0 = architecture default
    beta2: float = 0.0
    eps: float = 0.0
    avg_decay: float = 0.9999
    mini_batch_tokens: int = 1000
    epochs: int = 1
    max_updates: int = 0  # 0 = no limit
    workers: int = 1
    sync: bool = True
    seed: int = 1234
    log_every: int = 10
    clip_norm: float = 0.0
    checkpoint_every: int = 0
    processes: bool = True  # sync w>1: fork worker processes (False: run parts in-process)

    def __post_init__(self):
        if self.workers < 1:
            raise ContractError("workers must be at least 1")
        if self.mini_batch_tokens < 1:
            raise ContractError("mini-batch-tokens must be positive")

    def items(self) -> dict[str, str]:
        return {f"train-{f.name.replace('_', '-')}": str(getattr(self, f.name))
                for f in dataclasses.fields(self)}

    @classmethod
    def from_items(cls, items: Mapping[str, str]) -> "TrainConfig":
        kwargs = {}
        for f in dataclasses.fields(cls):
            key = f"train-{f.name.replace('_', '-')}"
            if key in items:
                raw = items[key]
                kind = f.type if isinstance(f.type, str) else f.type.__name__
                kwargs[f.name] = {"bool": lambda s: s == "True", "int": int, "float": float}[kind](raw)
        return cls(**kwargs)


class WorkerError(MtkError):
    pass


# -- synchronous executors -------------------------------------------------------

class _InProcess:
    """Computes the parts one after another in the calling process."""

    def __init__(self, model: Model):
        self.model = model

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False

    def gradients(self, parts, normalizer, seeds):
        results = [batch_gradients(self.model, p, normalizer, s) for p, s in zip(parts, seeds)]
        grads = {k: v.copy() for k, v in results[0][1].items()}
        for _, gr in results[1:]:
            for k, v in gr.items():
                grads[k] += v
        return sum(r[0] for r in results), grads


def _shared_arrays(ctx, template: Mapping[str, np.ndarray]):
    dtype = next(iter(template.values())).dtype
    total = sum(v.size for v in template.values())
    raw = ctx.RawArray(ctypes.c_char, max(total, 1) * dtype.itemsize)
    flat = np.frombuffer(raw, dtype=dtype, count=total)
    views, off = {}, 0
    for k, v in template.items():
        views[k] = flat[off:off + v.size].reshape(v.shape)
        off += v.size
    return raw, views


def _worker_main(conn, model: Model, grad_views):
    while True:
        msg = conn.recv()
        if msg is None:
            conn.close()
            return
        batch, normalizer, seed = msg
        try:
            loss, grads = batch_gradients(model, batch, normalizer, seed)
            for k, v in grads.items():
                grad_views[k][...] = v
            conn.send(("ok", loss))
        except Exception as exc:  # reported to the coordinator
            conn.send(("error", type(exc).__name__, str(exc)))


class _ForkPool:
    """Forked workers sharing parameters and gradient buffers through shared memory."""

    def __init__(self, model: Model, workers: int):
        self.model, self.workers = model, workers

    def __enter__(self):
        ctx = mp.get_context("fork")
        params = self.model.params
        self._param_raw, shared = _shared_arrays(ctx, params)
        self._originals = dict(params)
        for k, v in shared.items():
            v[...] = params[k]
            params[k] = v
        self._grad_raw, self.grad_views = [], []
        for _ in range(self.workers):
            raw, views = _shared_arrays(ctx, params)
            self._grad_raw.append(raw)
            self.grad_views.append(views)
        self.conns, self.procs = [], []
        for w in range(self.workers):
            parent, child = ctx.Pipe()
            proc = ctx.Process(target=_worker_main, args=(child, self.model, self.grad_views[w]),
                               daemon=True)
            proc.start()
            child.close()
            self.conns.append(parent)
            self.procs.append(proc)
        return self

    def __exit__(self, *exc):
        for conn in self.conns:
            try:
                conn.send(None)
            except OSError:
                pass
        for proc in self.procs:
            proc.join(timeout=10)
            if proc.is_alive():
                proc.terminate()
        # hand the final values back to the original (private) arrays
        for k, orig in self._originals.items():
            orig[...] = self.model.params[k]
            self.model.params[k] = orig
        return False

    def gradients(self, parts, normalizer, seeds):
        for conn, part, seed in zip(self.conns, parts, seeds):
            conn.send((part, normalizer, seed))
        losses, failures = [], []
        for w, conn in enumerate(self.conns[:len(parts)]):
            try:
                reply = conn.recv()
            except EOFError:
                reply = ("error", "WorkerDied", f"exit code {self.procs[w].exitcode}")
            if reply[0] == "ok":
                losses.append(reply[1])
            else:
                failures.append((w, reply[1], reply[2]))
        if failures:
            w, kind, msg = failures[0]
            text = f"worker {w} failed during step: {kind}: {msg}"
            raise NumericError(text) if kind == "NumericError" else WorkerError(text)
        grads = {k: v.copy() for k, v in self.grad_views[0].items()}
        for views in self.grad_views[1:len(parts)]:
            for k, v in views.items():
                grads[k] += v
        return sum(losses), grads


# -- asynchronous parameter store -----------------------------------------------

class ParameterStore:
    """Name -> (read-only array, crc32) entries, replaced whole on every write."""

    def __init__(self, params: Mapping[str, np.ndarray]):
        self._entries = {k: self._freeze(v.copy()) for k, v in params.items()}

    @staticmethod
    def _freeze(a: np.ndarray):
        a.flags.writeable = False
        return a, zlib.crc32(a.tobytes())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: e[0] for k, e in list(self._entries.items())}

    def swap(self, name: str, value: np.ndarray) -> None:
        self._entries[name] = self._freeze(value)

    def audit(self) -> tuple[int, int]:
        """(tensors checked, tensors whose bytes disagree with their checksum)."""
        checked = bad = 0
        for a, crc in list(self._entries.values()):
            checked += 1
            bad += zlib.crc32(a.tobytes()) != crc
        return checked, bad


# -- the trainer -----------------------------------------------------------------

class Trainer:
    def __init__(self, model: Model, cfg: TrainConfig, log_sink: Callable[[str], None] | None = None):
        self.model, self.cfg = model, cfg
        b1, b2, eps = adam_defaults(model.config)
        self.adam = AdamState.create(model.params, cfg.beta1 or b1, cfg.beta2 or b2, cfg.eps or eps)
        self.average = {k: v.copy() for k, v in model.params.items()}
        self.schedule = LrSchedule(cfg.lr, cfg.warmup)
        self.update = 0
        self.epoch = 0
        self.batch_index = 0
        self.metrics: list[str] = []
        self.losses: list[float] = []
        self.audits = [0, 0]
        self._sink = log_sink
        self._log_lock = threading.Lock()
        self._window = [time.perf_counter(), 0, 0.0, 0]  # start, source words, loss sum, steps

    # metrics
    def _record(self, loss: float, words: int, lr: float) -> None:
        with self._log_lock:
            self.losses.append(loss)
            self._window[1] += words
            self._window[2] += loss
            self._window[3] += 1
            if self.cfg.log_every and self.update % self.cfg.log_every == 0:
                elapsed = max(time.perf_counter() - self._window[0], 1e-9)
                line = (f"update={self.update} epoch={self.epoch + 1} "
                        f"loss={self._window[2] / self._window[3]:.6f} lr={lr:.8f} "
                        f"wps={self._window[1] / elapsed:.1f}")
                self.metrics.append(line)
                log.info(line)
                if self._sink:
                    self._sink(line)
                self._window = [time.perf_counter(), 0, 0.0, 0]

    @staticmethod
    def _words(batch: Batch) -> int:
        return batch.source_words if batch.sources else batch.target_words

    def epoch_batches(self, streams, n_sources: int, epoch: int):
        return make_batches(streams, n_sources, self.cfg.mini_batch_tokens,
                            seed=epoch_seed(self.cfg.seed, epoch))

    def _apply(self, grads, lr):
        if self.cfg.clip_norm > 0:
            clip_by_norm(grads, self.cfg.clip_norm)
        adam_step(self.model.params, grads, self.adam, lr)
        update_average(self.average, self.model.params, self.cfg.avg_decay)

    def _sync_step(self, executor, batch: Batch) -> None:
        parts = batch.split(self.cfg.workers) if self.cfg.workers > 1 else [batch]
        normalizer = float(batch.target_words)
        seeds = [step_seed(self.cfg.seed, self.update, k) for k in range(len(parts))]
        loss, grads = executor.gradients(parts, normalizer, seeds)
        lr = self.schedule(self.update + 1)
        self._apply(grads, lr)
        self.update += 1
        self._record(loss, self._words(batch), lr)

    def train(self, streams: Sequence[Sequence[Sequence[int]]], n_sources: int,
              epoch_end: Callable[["Trainer"], bool] | None = None,
              checkpoint_path=None) -> "Trainer":
        """Train for ``cfg.epochs`` epochs (or ``cfg.max_updates``), resuming where it stopped.

        ``epoch_end`` runs after each full epoch; returning True stops training.
        """
        if self.cfg.sync:
            self._train_sync(streams, n_sources, epoch_end, checkpoint_path)
        else:
            self._train_async(streams, n_sources, epoch_end)
        return self

    def _done(self) -> bool:
        return bool(self.cfg.max_updates) and self.update >= self.cfg.max_updates

    def _train_sync(self, streams, n_sources, epoch_end, checkpoint_path):
        cfg = self.cfg
        if cfg.workers > 1 and cfg.processes:
            executor = _ForkPool(self.model, cfg.workers)
        else:
            executor = _InProcess(self.model)
        with executor as ex:
            while self.epoch < cfg.epochs and not self._done():
                batches = self.epoch_batches(streams, n_sources, self.epoch)
                start = self.batch_index
                for batch in prefetch(batches[start:]):
                    if self._done():
                        break
                    self._sync_step(ex, batch)
                    self.batch_index += 1
                    if checkpoint_path and cfg.checkpoint_every and self.update % cfg.checkpoint_every == 0:
                        self.save_checkpoint(checkpoint_path)
                if self.batch_index < len(batches):
                    break
                self.epoch += 1
                self.batch_index = 0
                if epoch_end is not None and epoch_end(self):
                    break
        if checkpoint_path:
            self.save_checkpoint(checkpoint_path)

    def _train_async(self, streams, n_sources, epoch_end):
        cfg = self.cfg
        store = ParameterStore(self.model.params)
        lock = threading.Lock()
        stop = threading.Event()
        errors: list[BaseException] = []

        while self.epoch < cfg.epochs and not self._done() and not stop.is_set():
            batches = self.epoch_batches(streams, n_sources, self.epoch)
            queue = iter(list(enumerate(batches))[self.batch_index:])
            q_lock = threading.Lock()

            def next_batch():
                with q_lock:
                    return next(queue, None)

            def worker(w):
                try:
                    while not stop.is_set():
                        item = next_batch()
                        if item is None:
                            return
                        _, batch = item
                        with lock:
                            if self._done():
                                return
                            seed = step_seed(cfg.seed, self.update, w)
                        snap = store.snapshot()
                        loss, grads = batch_gradients(self.model, batch, float(batch.target_words),
                                                      seed, params=snap)
                        check_finite(grads)
                        with lock:
                            if self.cfg.clip_norm > 0:
                                clip_by_norm(grads, self.cfg.clip_norm)
                            self.adam.t += 1
                            self.update += 1
                            lr = self.schedule(self.update)
                            current = store.snapshot()
                            for name, p in current.items():
                                new = adam_update(name, p, grads[name], self.adam, lr)
                                store.swap(name, new)
                            update_average(self.average, store.snapshot(), cfg.avg_decay)
                            self.batch_index += 1
                        self._record(loss, self._words(batch), lr)
                except BaseException as exc:
                    errors.append(exc)
                    stop.set()

            def auditor():
                while not stop.is_set() and not done.is_set():
                    checked, bad = store.audit()
                    self.audits[0] += checked
                    self.audits[1] += bad
                    time.sleep(0.001)

            done = threading.Event()
            threads = [threading.Thread(target=worker, args=(w,)) for w in range(cfg.workers)]
            audit = threading.Thread(target=auditor, daemon=True)
            audit.start()
            for t in threads:
                t.start()
            for t in threads:
                t.join()
            done.set()
            audit.join()
            if errors:
                break
            if self.batch_index < len(batches):
                break
            self.epoch += 1
            self.batch_index = 0
            for k, v in store.snapshot().items():
                self.model.params[k][...] = v
            if epoch_end is not None and epoch_end(self):
                break
        for k, v in store.snapshot().items():
            self.model.params[k][...] = v
        if errors:
            raise errors[0]

    # checkpoints
    def save_checkpoint(self, path) -> None:
        extra = {f"adam.m.{k}": v for k, v in self.adam.m.items()}
        extra.update({f"adam.v.{k}": v for k, v in self.adam.v.items()})
        extra.update({f"avg.{k}": v for k, v in self.average.items()})
        info = {"update": self.update, "epoch": self.epoch, "batch-index": self.batch_index,
                "adam-t": self.adam.t, "adam-beta1": repr(self.adam.beta1),
                "adam-beta2": repr(self.adam.beta2), "adam-eps": repr(self.adam.eps)}
        info.update(self.cfg.items())
        save_model(self.model, path, extra_config=info, extra_tensors=extra)

    @classmethod
    def resume(cls, path, cfg: TrainConfig | None = None, log_sink=None) -> "Trainer":
        model, info, tensors = load_model(path)
        if "update" not in info:
            raise ContractError(f"{path} is a model file, not a training checkpoint")
        cfg = cfg or TrainConfig.from_items(info)
        trainer = cls(model, cfg, log_sink)
        trainer.update = int(info["update"])
        trainer.epoch = int(info["epoch"])
        trainer.batch_index = int(info["batch-index"])
        trainer.adam.t = int(info["adam-t"])
        trainer.adam.beta1 = float(info["adam-beta1"])
        trainer.adam.beta2 = float(info["adam-beta2"])
        trainer.adam.eps = float(info["adam-eps"])
        for k in model.params:
            trainer.adam.m[k][...] = tensors[f"adam.m.{k}"]
            trainer.adam.v[k][...] = tensors[f"adam.v.{k}"]
            trainer.average[k][...] = tensors[f"avg.{k}"]
        return trainer


def train_sync(model: Model, streams, n_sources: int, cfg: TrainConfig, **kwargs) -> Trainer:
    return Trainer(model, dataclasses.replace(cfg, sync=True)).train(streams, n_sources, **kwargs)


def train_async(model: Model, streams, n_sources: int, cfg: TrainConfig, **kwargs) -> Trainer:
    return Trainer(model, dataclasses.replace(cfg, sync=False)).train(streams, n_sources, **kwargs)
