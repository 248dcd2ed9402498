"""Encoder/decoder framework.

Encoders turn a batch into :class:`EncoderState` objects. A decoder creates a
:class:`DecoderState` from any number of encoder states and advances it with
``step``, which consumes either a whole teacher-forced target side
(training, scoring) or one token per hypothesis (translation). Beam search
only ever talks to these two classes, so new architectures plug in without
touching search or ensembling.
"""
from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import ops
from .data import Batch
from .errors import ContractError, DimensionError
from .graph import ExpressionGraph, NodeRef
from .layers import Linear, ParamBuilder


def _gather(item, indices):
    if item is None:
        return None
    if isinstance(item, NodeRef):
        return ops.rows(item, indices)
    return np.asarray(item)[indices]


@dataclass
class EncoderState:
    context: NodeRef  # [b, s, d]
    mask: np.ndarray  # [b, s]
    batch: Batch | None = None

    def __post_init__(self):
        if self.context.shape[:2] != self.mask.shape:
            raise DimensionError(f"context {self.context.shape} does not match mask {self.mask.shape}")

    def select(self, indices) -> "EncoderState":
        return EncoderState(ops.rows(self.context, indices), self.mask[indices], self.batch)


@dataclass
class DecoderState:
    """Per-hypothesis decoder state.

    ``payload`` maps names to row-indexed tensors (graph nodes or arrays);
    ``select`` gathers every one of them, so beam reordering commutes with
    ``step`` for any decoder that keeps its recurrent state there.
    """

    encoder_states: list[EncoderState]
    payload: dict = field(default_factory=dict)
    logits: NodeRef | None = None
    position: int = 0
    size: int = 0

    def _check(self, indices):
        indices = np.asarray(indices, dtype=np.int64).reshape(-1)
        if indices.size == 0 or indices.min() < 0 or indices.max() >= self.size:
            raise ContractError(f"hypothesis index out of range for {self.size} hypotheses")
        return indices

    def select(self, indices) -> "DecoderState":
        indices = self._check(indices)
        return replace(
            self,
            encoder_states=[e.select(indices) for e in self.encoder_states],
            payload={k: _gather(v, indices) for k, v in self.payload.items()},
            logits=None if self.logits is None else ops.rows(self.logits, indices),
            size=len(indices),
        )


@dataclass
class HardAttentionState(DecoderState):
    """Decoder state carrying a monotone attention position per hypothesis."""

    attention_index: np.ndarray = None

    def select(self, indices) -> "HardAttentionState":
        new = super().select(indices)
        new.attention_index = self.attention_index[self._check(indices)].copy()
        return new


class Encoder(ABC):
    context_dim: int

    @abstractmethod
    def build(self, g: ExpressionGraph, batch: Batch, stream: int) -> EncoderState:
        """Encode source stream ``stream`` of ``batch`` in one call."""


class Decoder(ABC):
    arity: tuple[int, ...] = (1,)

    @classmethod
    def expected_memory_dim(cls, config) -> int | None:
        return None

    @abstractmethod
    def start_state(self, g: ExpressionGraph, encoder_states: Sequence[EncoderState],
                    batch_size: int) -> DecoderState:
        ...

    @abstractmethod
    def step(self, g: ExpressionGraph, state: DecoderState, inputs: np.ndarray) -> DecoderState:
        """Consume previous-token ids ``[n, t]`` (``-1`` = sentence start)."""

    def check_arity(self, encoder_states):
        if len(encoder_states) not in self.arity:
            raise ContractError(
                f"{type(self).__name__} expects {' or '.join(map(str, self.arity))} "
                f"encoder states, got {len(encoder_states)}")


ENCODERS: dict[str, Callable[..., Encoder]] = {}
DECODERS: dict[str, Callable[..., Decoder]] = {}


def register_encoder(name):
    def deco(cls):
        ENCODERS[name] = cls
        return cls
    return deco


def register_decoder(name):
    def deco(cls):
        DECODERS[name] = cls
        return cls
    return deco


class Model:
    """Encoders, adapters and a decoder sharing one parameter dictionary."""

    def __init__(self, config, pb: ParamBuilder, encoders: list[Encoder], decoder: Decoder,
                 adapters: list[Linear | None]):
        self.config = config
        self.params: dict[str, np.ndarray] = pb.params
        self.encoders = encoders
        self.decoder = decoder
        self.adapters = adapters

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype.type

    def graph(self, inference=False, seed=0, params=None) -> ExpressionGraph:
        """A fresh graph with this model's parameters registered (shared arrays).

        ``params`` substitutes another name-to-array mapping, e.g. a snapshot.
        """
        g = ExpressionGraph(dtype=self.dtype, inference=inference, seed=seed)
        for name, value in (params or self.params).items():
            g.add_parameter(name, value)
        return g

    def encode(self, g, batch: Batch) -> list[EncoderState]:
        if len(batch.sources) != len(self.encoders):
            raise ContractError(f"model has {len(self.encoders)} encoders, batch has "
                                f"{len(batch.sources)} source streams")
        if self.encoders and batch.size == 0:
            raise ContractError("empty batch")
        states = []
        for k, (enc, adapter) in enumerate(zip(self.encoders, self.adapters)):
            st = enc.build(g, batch, k)
            if adapter is not None:
                st = EncoderState(adapter(g, st.context), st.mask, st.batch)
            states.append(st)
        return states

    def start_state(self, g, batch: Batch) -> DecoderState:
        return self.decoder.start_state(g, self.encode(g, batch), batch.size)

    def step(self, g, state, inputs) -> DecoderState:
        return self.decoder.step(g, state, np.asarray(inputs, dtype=np.int64))

    @staticmethod
    def teacher_inputs(target: np.ndarray) -> np.ndarray:
        prev = np.empty_like(target)
        prev[:, 0] = -1
        prev[:, 1:] = target[:, :-1]
        return prev

    def logits(self, g, batch: Batch) -> NodeRef:
        state = self.start_state(g, batch)
        return self.step(g, state, self.teacher_inputs(batch.target)).logits

    def loss(self, g, batch: Batch, normalizer: float | None = None) -> NodeRef:
        """Mean cross-entropy over unmasked target tokens (or / ``normalizer``)."""
        return ops.cross_entropy(self.logits(g, batch), batch.target, batch.target_mask, normalizer)

    def token_logprobs(self, g, batch: Batch) -> np.ndarray:
        """Teacher-forced log-probabilities of each target token, ``[b, t]``."""
        lp = g.value(ops.log_softmax(self.logits(g, batch)))
        picked = np.take_along_axis(lp, batch.target[..., None], axis=-1)[..., 0]
        return picked * batch.target_mask


def compose(config, pb: ParamBuilder, encoder_kinds: Sequence[str], decoder_kind: str,
            embeddings, adapters: bool = True) -> Model:
    """Build a model from registered encoder and decoder kinds.

    ``embeddings`` supplies parameter names (see :mod:`mtk.models`).
    """
    try:
        dec_cls = DECODERS[decoder_kind]
    except KeyError:
        raise ContractError(f"unknown decoder kind {decoder_kind!r}; known: {sorted(DECODERS)}") from None
    encoders = []
    for k, kind in enumerate(encoder_kinds):
        try:
            enc_cls = ENCODERS[kind]
        except KeyError:
            raise ContractError(f"unknown encoder kind {kind!r}; known: {sorted(ENCODERS)}") from None
        encoders.append(enc_cls(pb, f"encoder{k}", config, embeddings.source(k)))
    memory_dim = dec_cls.expected_memory_dim(config)
    adapter_layers = []
    ctx_dims = []
    for k, enc in enumerate(encoders):
        if memory_dim is not None and enc.context_dim != memory_dim:
            if not adapters:
                raise DimensionError(
                    f"encoder {k} context dim {enc.context_dim} != decoder memory dim {memory_dim}")
            adapter_layers.append(Linear(pb, f"adapter{k}", enc.context_dim, memory_dim))
            ctx_dims.append(memory_dim)
        else:
            adapter_layers.append(None)
            ctx_dims.append(enc.context_dim)
    decoder = dec_cls(pb, "decoder", config, ctx_dims, embeddings)
    if len(encoders) not in decoder.arity:
        raise ContractError(f"decoder {decoder_kind!r} cannot take {len(encoders)} encoders")
    return Model(config, pb, encoders, decoder, adapter_layers)
