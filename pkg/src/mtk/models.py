"""The model zoo: RNN and Transformer encoders/decoders and their configs."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .errors import ContractError, DimensionError
from .framework import (Decoder, DecoderState, Encoder, EncoderState, HardAttentionState,
                        Model, compose, register_decoder, register_encoder)
from .layers import (DeepTransitionCell, GRUBlock, LayerNorm, Linear, ParamBuilder,
                     TransformerLayer, causal_mask, positional_encoding)

ARCHITECTURES = {
    # id: (encoder kind, decoder kind, sources, encoder depth, decoder depth)
    "s2s-shallow": ("rnn", "rnn", 1, 1, 2),
    "s2s-deep": ("rnn", "rnn", 1, 4, 8),
    "transformer": ("transformer", "transformer", 1, 1, 1),
    "lm": ("rnn", "rnn", 0, 1, 2),
    "dual-source": ("rnn", "rnn", 2, 1, 2),
    "hard-attention": ("rnn", "hard-attention", 1, 1, 2),
}

TYING_MODES = ("none", "src-trg", "all")


@dataclass
class ModelConfig:
    type: str = "s2s-shallow"
    vocab_sizes: list[int] = field(default_factory=lambda: [0, 0])  # sources..., target
    dim_emb: int = 64
    dim_rnn: int = 128
    heads: int = 4
    layers: int = 2
    enc_depth: int = 0  # 0 = architecture default
    dec_depth: int = 0
    dropout: float = 0.1
    tying: str = "all"
    layer_norm: bool = True
    direction: str = "l2r"
    prenorm: bool = True
    adapters: bool = True
    encoder: str = ""  # "" = architecture default
    decoder: str = ""
    seed: int = 1234
    dtype: str = "float32"

    def __post_init__(self):
        self.validate()

    @property
    def sources(self) -> int:
        return len(self.vocab_sizes) - 1

    def resolved(self) -> "ModelConfig":
        """Copy with architecture defaults filled in."""
        if self.type not in ARCHITECTURES:
            raise ContractError(f"unknown architecture {self.type!r}; known: {sorted(ARCHITECTURES)}")
        enc, dec, _, enc_depth, dec_depth = ARCHITECTURES[self.type]
        return dataclasses.replace(
            self,
            encoder=self.encoder or enc,
            decoder=self.decoder or dec,
            enc_depth=self.enc_depth or enc_depth,
            dec_depth=self.dec_depth or dec_depth,
        )

    def validate(self) -> None:
        if self.type not in ARCHITECTURES:
            raise ContractError(f"unknown architecture {self.type!r}; known: {sorted(ARCHITECTURES)}")
        arity = ARCHITECTURES[self.type][2]
        if any(v == 0 for v in self.vocab_sizes):
            return  # sizes filled in later (e.g. from vocab files)
        if self.sources != arity:
            raise ContractError(f"{self.type} needs {arity} source vocabularies, got {self.sources}")
        if self.tying not in TYING_MODES:
            raise ContractError(f"tying must be one of {TYING_MODES}")
        if self.direction not in ("l2r", "r2l"):
            raise ContractError("direction must be l2r or r2l")
        if self.tying == "all" and len(set(self.vocab_sizes)) != 1:
            raise DimensionError(f"tying=all needs one shared vocabulary, got sizes {self.vocab_sizes}")
        if self.tying == "src-trg" and len(set(self.vocab_sizes)) != 1:
            raise DimensionError(f"tying=src-trg needs equal vocabulary sizes, got {self.vocab_sizes}")
        if self.dim_emb % self.heads and "transformer" in (self.encoder, self.decoder, self.type):
            raise DimensionError(f"dim_emb {self.dim_emb} not divisible by {self.heads} heads")
        if not 0 <= self.dropout < 1:
            raise ContractError("dropout must be in [0, 1)")

    # -- key: value text ---------------------------------------------------
    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, list):
                v = ",".join(map(str, v))
            lines.append(f"{f.name.replace('_', '-')}: {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, items: dict[str, str]) -> "ModelConfig":
        kwargs = {}
        for f in dataclasses.fields(cls):
            key = f.name.replace("_", "-")
            if key not in items:
                continue
            raw = items[key]
            if f.name == "vocab_sizes":
                kwargs[f.name] = [int(x) for x in raw.split(",") if x]
            elif f.type in ("bool", bool):
                kwargs[f.name] = str(raw).lower() in ("1", "true", "yes")
            elif f.type in ("int", int):
                kwargs[f.name] = int(raw)
            elif f.type in ("float", float):
                kwargs[f.name] = float(raw)
            else:
                kwargs[f.name] = str(raw)
        return cls(**kwargs)


def parse_key_values(text: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if ":" not in line:
            raise ContractError(f"line {n}: expected 'key: value', got {line!r}")
        k, v = line.split(":", 1)
        out[k.strip()] = v.strip()
    return out


class Embeddings:
    """Parameter names for source, target and output embeddings under a tying mode."""

    def __init__(self, pb: ParamBuilder, config: ModelConfig):
        e = config.dim_emb
        sizes = config.vocab_sizes
        self.tying = config.tying
        n_src = config.sources
        if self.tying == "all":
            shared = pb.matrix("Wemb", sizes[-1], e)
            self._sources = [shared] * n_src
            self.target = self.output = shared
        elif self.tying == "src-trg":
            shared = pb.matrix("Wemb", sizes[-1], e)
            self._sources = [shared] * n_src
            self.target = shared
            self.output = pb.matrix("decoder.Wout", sizes[-1], e)
        else:
            self._sources = [pb.matrix(f"encoder{k}.Wemb", sizes[k], e) for k in range(n_src)]
            self.target = pb.matrix("decoder.Wemb", sizes[-1], e)
            self.output = pb.matrix("decoder.Wout", sizes[-1], e)
        self.output_bias = pb.zeros("decoder.bout", sizes[-1])

    def source(self, k: int) -> str:
        return self._sources[k]

    def logits(self, g, hidden):
        W = g.parameter(self.output)
        return ops.add(ops.matmul(hidden, ops.transpose(W, (1, 0))), g.parameter(self.output_bias))


def _mask_mix(g, new, old, m):
    """``m * new + (1 - m) * old`` skipped when no row is padded."""
    if m.all():
        return new
    return ops.add(old, ops.mul(g.constant(m[:, None]), ops.sub(new, old)))


# -- encoders -------------------------------------------------------------

@register_encoder("rnn")
class RNNEncoder(Encoder):
    """Bidirectional deep-transition GRU encoder; context is ``[b, s, 2d]``."""

    def __init__(self, pb, name, config: ModelConfig, emb_name: str):
        self.emb = emb_name
        self.d = config.dim_rnn
        self.dropout = config.dropout
        self.fwd = DeepTransitionCell(pb, f"{name}.fwd", config.dim_emb, self.d,
                                      config.enc_depth, config.layer_norm)
        self.bwd = DeepTransitionCell(pb, f"{name}.bwd", config.dim_emb, self.d,
                                      config.enc_depth, config.layer_norm)
        self.context_dim = 2 * self.d

    def build(self, g, batch, stream):
        ids, mask = batch.sources[stream], batch.source_masks[stream]
        b, s = ids.shape
        emb = ops.dropout(ops.embedding(g.parameter(self.emb), ids), self.dropout, variational_axis=1)
        xs = [ops.select(emb, 1, t) for t in range(s)] if s > 1 else [ops.reshape(emb, (b, -1))]
        zero = g.constant(np.zeros((b, self.d)))
        outs = {}
        for cell, order in ((self.fwd, range(s)), (self.bwd, range(s - 1, -1, -1))):
            h = zero
            states = [None] * s
            for t in order:
                new, _, _ = cell(g, xs[t], h)
                h = _mask_mix(g, new, h, mask[:, t])
                states[t] = h
            outs[cell] = ops.stack(states, axis=1) if s > 1 else ops.reshape(states[0], (b, 1, self.d))
        context = ops.concat([outs[self.fwd], outs[self.bwd]], axis=2)
        return EncoderState(context, mask, batch)


@register_encoder("transformer")
class TransformerEncoder(Encoder):
    def __init__(self, pb, name, config: ModelConfig, emb_name: str):
        self.emb = emb_name
        self.e = config.dim_emb
        self.dropout = config.dropout
        self.layers = [TransformerLayer(pb, f"{name}.l{i + 1}", self.e, config.heads, "encoder",
                                        prenorm=config.prenorm, dropout=config.dropout)
                       for i in range(config.layers)]
        self.final_ln = LayerNorm(pb, f"{name}.ln_final", self.e) if config.prenorm else None
        self.context_dim = self.e

    def build(self, g, batch, stream):
        ids, mask = batch.sources[stream], batch.source_masks[stream]
        b, s = ids.shape
        x = ops.affine(ops.embedding(g.parameter(self.emb), ids), math.sqrt(self.e))
        x = ops.add(x, g.constant(positional_encoding(s, self.e)))
        x = ops.dropout(x, self.dropout)
        att_mask = mask[:, None, None, :]
        for layer in self.layers:
            x = layer(g, x, self_mask=att_mask)
        if self.final_ln is not None:
            x = self.final_ln(g, x)
        return EncoderState(x, mask, batch)


# -- decoders -------------------------------------------------------------

class _RNNOutput:
    """Deep output ``tanh(L(s) + L(y_prev) + L(c))`` projected through the output embedding."""

    def __init__(self, pb, name, d, e, ctx_dim, emb: Embeddings):
        self.emb = emb
        self.s = Linear(pb, f"{name}.out_s", d, e)
        self.y = Linear(pb, f"{name}.out_y", e, e, bias=False)
        self.c = Linear(pb, f"{name}.out_c", ctx_dim, e, bias=False) if ctx_dim else None

    def __call__(self, g, states, prev_emb, contexts, dropout):
        pre = ops.add(self.s(g, states), self.y(g, prev_emb))
        if self.c is not None:
            pre = ops.add(pre, self.c(g, contexts))
        hidden = ops.dropout(ops.tanh(pre), dropout, variational_axis=1)
        return self.emb.logits(g, hidden)


def _stack_time(g, xs, n):
    if len(xs) == 1:
        return ops.reshape(xs[0], (n, 1, xs[0].shape[1]))
    return ops.stack(xs, axis=1)


def _time_slices(emb, n):
    t = emb.shape[1]
    if t == 1:
        return [ops.reshape(emb, (n, emb.shape[2]))]
    return [ops.select(emb, 1, j) for j in range(t)]


def _masked_mean(g, st: EncoderState):
    m = st.mask[..., None]
    total = ops.sum(ops.mul(st.context, g.constant(m)), axis=1)
    return ops.div(total, g.constant(st.mask.sum(axis=1, keepdims=True)))


@register_decoder("rnn")
class RNNDecoder(Decoder):
    """Deep-transition GRU decoder; attention sits after block 1 when there are encoders."""

    arity = tuple(range(0, 8))

    def __init__(self, pb, name, config: ModelConfig, ctx_dims, emb: Embeddings):
        self.emb = emb
        self.d, self.e = config.dim_rnn, config.dim_emb
        self.dropout = config.dropout
        self.arity = (len(ctx_dims),)
        self.init = Linear(pb, f"{name}.init", sum(ctx_dims), self.d) if ctx_dims else None
        self.cell = DeepTransitionCell(
            pb, f"{name}.cell", self.e, self.d, config.dec_depth, config.layer_norm,
            context_dims=ctx_dims, attention_after=1 if ctx_dims else None)
        self.out = _RNNOutput(pb, name, self.d, self.e, self.cell.context_dim, emb)

    def start_state(self, g, encoder_states, batch_size):
        self.check_arity(encoder_states)
        payload = {}
        if encoder_states:
            means = [_masked_mean(g, st) for st in encoder_states]
            pooled = means[0] if len(means) == 1 else ops.concat(means, axis=1)
            s0 = ops.tanh(self.init(g, pooled))
            for k, (st, att) in enumerate(zip(encoder_states, self.cell.slot.attentions)):
                payload[f"proj{k}"] = att.prepare(g, st.context)
        else:
            s0 = g.constant(np.zeros((batch_size, self.d)))
        payload["s"] = s0
        return DecoderState(list(encoder_states), payload, None, 0, batch_size)

    def step(self, g, state, inputs):
        n, t = inputs.shape
        if n != state.size:
            raise ContractError(f"{n} input rows for {state.size} hypotheses")
        emb = ops.dropout(ops.embedding(g.parameter(self.emb.target), inputs),
                          self.dropout, variational_axis=1)
        contexts = [(st.context, state.payload[f"proj{k}"]) for k, st in enumerate(state.encoder_states)]
        masks = [st.mask for st in state.encoder_states]
        ctx_drop = None
        if self.cell.slot is not None and self.dropout > 0 and not g.inference:
            ctx_drop = g.constant(ops.dropout_mask(g.rng, (n, self.cell.context_dim), self.dropout,
                                                   dtype=g.dtype))
        s = state.payload["s"]
        states, ctxs = [], []
        for x in _time_slices(emb, n):
            s, c, _ = self.cell(g, x, s, contexts, masks, ctx_drop)
            states.append(s)
            ctxs.append(c)
        C = _stack_time(g, ctxs, n) if self.cell.slot is not None else None
        logits = self.out(g, _stack_time(g, states, n), emb, C, self.dropout)
        payload = dict(state.payload, s=s)
        return DecoderState(state.encoder_states, payload, logits, state.position + t, n)


def _one_hot_rows(idx, length, dtype):
    out = np.zeros((len(idx), 1, length), dtype=dtype)
    out[np.arange(len(idx)), 0, idx] = 1
    return out


@register_decoder("hard-attention")
class HardAttentionDecoder(Decoder):
    """Monotone hard attention: each step the position stays or advances by one.

    The advance decision is a thresholded gate on the decoder state; its
    gradient passes straight through into the next step's context mix.
    """

    arity = (1,)

    def __init__(self, pb, name, config: ModelConfig, ctx_dims, emb: Embeddings):
        (ctx_dim,) = ctx_dims
        self.emb = emb
        self.d, self.e = config.dim_rnn, config.dim_emb
        self.dropout = config.dropout
        self.init = Linear(pb, f"{name}.init", ctx_dim, self.d)
        self.block1 = GRUBlock(pb, f"{name}.gru1", self.e, self.d, config.layer_norm)
        self.block2 = GRUBlock(pb, f"{name}.gru2", ctx_dim, self.d, config.layer_norm)
        self.extra = [GRUBlock(pb, f"{name}.gru{i + 1}", None, self.d, config.layer_norm)
                      for i in range(2, config.dec_depth)]
        self.gate = Linear(pb, f"{name}.gate", self.d, 1)
        self.out = _RNNOutput(pb, name, self.d, self.e, ctx_dim, emb)

    def start_state(self, g, encoder_states, batch_size):
        self.check_arity(encoder_states)
        (st,) = encoder_states
        s0 = ops.tanh(self.init(g, _masked_mean(g, st)))
        payload = {"s": s0, "adv": g.constant(np.zeros((batch_size, 1)))}
        return HardAttentionState(list(encoder_states), payload, None, 0, batch_size,
                                  attention_index=np.zeros(batch_size, dtype=np.int64))

    def step(self, g, state: HardAttentionState, inputs):
        n, t = inputs.shape
        if n != state.size:
            raise ContractError(f"{n} input rows for {state.size} hypotheses")
        (enc,) = state.encoder_states
        keys = enc.context
        src_len = enc.mask.sum(axis=1).astype(np.int64)
        S, dk = keys.shape[1], keys.shape[2]
        emb = ops.dropout(ops.embedding(g.parameter(self.emb.target), inputs),
                          self.dropout, variational_axis=1)
        s, adv = state.payload["s"], state.payload["adv"]
        idx = state.attention_index.copy()
        states, ctxs = [], []
        for x in _time_slices(emb, n):
            adv_val = g.value(adv)[:, 0].astype(np.int64)
            prev = idx - adv_val
            c_new = ops.reshape(ops.matmul(g.constant(_one_hot_rows(idx, S, g.dtype)), keys), (n, dk))
            c_old = ops.reshape(ops.matmul(g.constant(_one_hot_rows(prev, S, g.dtype)), keys), (n, dk))
            c = ops.add(c_old, ops.mul(adv, ops.sub(c_new, c_old)))
            s = self.block1(g, s, x)
            s = self.block2(g, s, c)
            for block in self.extra:
                s = block(g, s)
            can = (idx < src_len - 1).astype(g.dtype)[:, None]
            adv = ops.mul(ops.straight_through(ops.sigmoid(self.gate(g, s))), g.constant(can))
            idx = idx + g.value(adv)[:, 0].astype(np.int64)
            states.append(s)
            ctxs.append(c)
        logits = self.out(g, _stack_time(g, states, n), emb, _stack_time(g, ctxs, n), self.dropout)
        return HardAttentionState(state.encoder_states, dict(state.payload, s=s, adv=adv), logits,
                                  state.position + t, n, attention_index=idx)


@register_decoder("transformer")
class TransformerDecoder(Decoder):
    """Causal self-attention decoder; the payload caches each layer's past inputs."""

    arity = (0, 1)

    @classmethod
    def expected_memory_dim(cls, config):
        return config.dim_emb

    def __init__(self, pb, name, config: ModelConfig, ctx_dims, emb: Embeddings):
        self.emb = emb
        self.e = config.dim_emb
        self.dropout = config.dropout
        self.arity = (len(ctx_dims),)
        memory = self.e if ctx_dims else None
        self.layers = [TransformerLayer(pb, f"{name}.l{i + 1}", self.e, config.heads, "decoder",
                                        d_memory=memory, prenorm=config.prenorm,
                                        dropout=config.dropout)
                       for i in range(config.layers)]
        self.final_ln = LayerNorm(pb, f"{name}.ln_final", self.e) if config.prenorm else None

    def start_state(self, g, encoder_states, batch_size):
        self.check_arity(encoder_states)
        return DecoderState(list(encoder_states), {}, None, 0, batch_size)

    def step(self, g, state, inputs):
        n, t = inputs.shape
        if n != state.size:
            raise ContractError(f"{n} input rows for {state.size} hypotheses")
        p = state.position
        x = ops.affine(ops.embedding(g.parameter(self.emb.target), inputs), math.sqrt(self.e))
        x = ops.add(x, g.constant(positional_encoding(t, self.e, offset=p)))
        x = ops.dropout(x, self.dropout)
        memory = memory_mask = None
        if state.encoder_states:
            memory = state.encoder_states[0].context
            memory_mask = state.encoder_states[0].mask[:, None, None, :]
        self_mask = causal_mask(t, p + t, offset=p)
        payload = dict(state.payload)
        for i, layer in enumerate(self.layers):
            key = f"hist{i}"
            history = state.payload.get(key)
            payload[key] = x if history is None else ops.concat([history, x], axis=1)
            x = layer(g, x, self_mask=self_mask, history=history, memory=memory, memory_mask=memory_mask)
        if self.final_ln is not None:
            x = self.final_ln(g, x)
        logits = self.emb.logits(g, x)
        return DecoderState(state.encoder_states, payload, logits, p + t, n)


# -- construction ---------------------------------------------------------

def build_model(config: ModelConfig) -> Model:
    config = config.resolved()
    config.validate()
    if any(v < 1 for v in config.vocab_sizes):
        raise ContractError(f"vocabulary sizes not set: {config.vocab_sizes}")
    dtype = np.dtype(config.dtype).type
    pb = ParamBuilder(seed=config.seed, dtype=dtype)
    embeddings = Embeddings(pb, config)
    return compose(config, pb, [config.encoder] * config.sources, config.decoder,
                   embeddings, adapters=config.adapters)


def parameter_census(model: Model) -> list[tuple[str, tuple[int, ...], int]]:
    return [(name, tuple(v.shape), int(v.size)) for name, v in model.params.items()]


def parameter_count(model: Model) -> int:
    return sum(c for _, _, c in parameter_census(model))
