"""Reusable network blocks assembled from graph operators.

Each block declares its parameters on a :class:`ParamBuilder` when the model
is constructed and looks them up by name in the graph when it is applied, so
one model object can drive any number of graphs (training workers, decoders).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import ops
from .errors import ContractError, DimensionError
from .graph import ExpressionGraph, NodeRef


class ParamBuilder:
    """Ordered, seeded parameter declarations (Glorot-uniform matrices)."""

    def __init__(self, seed: int = 0, dtype=np.float32):
        self.rng = np.random.default_rng(seed)
        self.dtype = dtype
        self.params: dict[str, np.ndarray] = {}

    def _add(self, name, value):
        if name in self.params:
            raise ContractError(f"parameter {name!r} declared twice")
        self.params[name] = np.ascontiguousarray(value, dtype=self.dtype)
        return name

    def matrix(self, name, rows, cols):
        limit = math.sqrt(6.0 / (rows + cols))
        return self._add(name, self.rng.uniform(-limit, limit, size=(rows, cols)))

    def zeros(self, name, *shape):
        return self._add(name, np.zeros(shape))

    def ones(self, name, *shape):
        return self._add(name, np.ones(shape))

    def vector(self, name, n, scale=0.1):
        return self._add(name, self.rng.uniform(-scale, scale, size=(n,)))


class Linear:
    def __init__(self, pb: ParamBuilder, name: str, d_in: int, d_out: int, bias: bool = True):
        self.d_in, self.d_out = d_in, d_out
        self.W = pb.matrix(f"{name}.W", d_in, d_out)
        self.b = pb.zeros(f"{name}.b", d_out) if bias else None

    def __call__(self, g: ExpressionGraph, x: NodeRef) -> NodeRef:
        b = g.parameter(self.b) if self.b else None
        return ops.linear(x, g.parameter(self.W), b)


class LayerNorm:
    def __init__(self, pb: ParamBuilder, name: str, d: int):
        self.gain = pb.ones(f"{name}.gain", d)
        self.bias = pb.zeros(f"{name}.bias", d)

    def __call__(self, g, x):
        return ops.layer_norm(x, g.parameter(self.gain), g.parameter(self.bias))


class GRUBlock:
    """One GRU block; ``d_in=None`` makes it transition-only."""

    def __init__(self, pb: ParamBuilder, name: str, d_in: int | None, d: int, layer_norm: bool):
        self.d_in, self.d = d_in, d
        self.W = pb.matrix(f"{name}.W", d_in, 3 * d) if d_in else None
        self.U = pb.matrix(f"{name}.U", d, 3 * d)
        self.b = pb.zeros(f"{name}.b", 3 * d)
        self.ln = None
        if layer_norm:
            self.ln = []
            for gate in ("z", "r", "x")[:3 if d_in else 2]:
                self.ln += [pb.ones(f"{name}.ln_{gate}.gain", d), pb.zeros(f"{name}.ln_{gate}.bias", d)]

    def __call__(self, g, state, x=None):
        if (x is None) != (self.W is None):
            raise ContractError("GRU block input presence does not match its configuration")
        ln = [g.parameter(n) for n in self.ln] if self.ln else None
        W = g.parameter(self.W) if self.W else None
        return ops.gru_cell(state, x, W, g.parameter(self.U), g.parameter(self.b), ln)


class BahdanauAttention:
    """Additive attention ``v' tanh(LN?(W q + U k_j + b))`` over keys = values."""

    def __init__(self, pb, name, d_query, d_key, d_att, layer_norm):
        self.d_key = d_key
        self.Wq = pb.matrix(f"{name}.Wq", d_query, d_att)
        self.Uk = pb.matrix(f"{name}.Uk", d_key, d_att)
        self.b = pb.zeros(f"{name}.b", d_att)
        self.v = pb.matrix(f"{name}.v", d_att, 1)
        self.ln = LayerNorm(pb, f"{name}.ln", d_att) if layer_norm else None

    def prepare(self, g, keys: NodeRef) -> NodeRef:
        """Project keys once per sequence: ``[b, s, d_key] -> [b, s, d_att]``."""
        return ops.add(ops.matmul(keys, g.parameter(self.Uk)), g.parameter(self.b))

    def __call__(self, g, query, keys, projected, mask):
        n, s, _ = keys.shape
        q = ops.reshape(ops.matmul(query, g.parameter(self.Wq)), (n, 1, -1))
        pre = ops.add(projected, q)
        if self.ln is not None:
            pre = self.ln(g, pre)
        energies = ops.reshape(ops.matmul(ops.tanh(pre), g.parameter(self.v)), (n, s))
        weights = ops.softmax(energies, mask)
        context = ops.matmul(ops.reshape(weights, (n, 1, s)), keys)
        return ops.reshape(context, (n, keys.shape[2])), weights


def bahdanau_attention(g, att: BahdanauAttention, query, keys, mask):
    return att(g, query, keys, att.prepare(g, keys), mask)


class MultiHeadAttention:
    def __init__(self, pb, name, d, heads, d_kv: int | None = None):
        if d % heads:
            raise DimensionError(f"model dim {d} not divisible by {heads} heads")
        self.d, self.heads = d, heads
        d_kv = d_kv or d
        self.q = Linear(pb, f"{name}.q", d, d)
        self.k = Linear(pb, f"{name}.k", d_kv, d)
        self.v = Linear(pb, f"{name}.v", d_kv, d)
        self.o = Linear(pb, f"{name}.o", d, d)

    def _split(self, x):
        n, t, _ = x.shape
        return ops.transpose(ops.reshape(x, (n, t, self.heads, self.d // self.heads)), (0, 2, 1, 3))

    def __call__(self, g, query, memory, mask=None, return_weights=False):
        """``mask`` broadcasts to ``[n, heads, t_q, t_k]`` (1 = may attend)."""
        n, tq, _ = query.shape
        tk = memory.shape[1]
        dk = self.d // self.heads
        Q = self._split(self.q(g, query))
        K = self._split(self.k(g, memory))
        V = self._split(self.v(g, memory))
        scores = ops.affine(ops.matmul(Q, ops.transpose(K, (0, 1, 3, 2))), 1.0 / math.sqrt(dk))
        weights = ops.softmax(scores, mask)
        ctx = ops.matmul(weights, V)
        ctx = ops.reshape(ops.transpose(ctx, (0, 2, 1, 3)), (n, tq, self.d))
        out = self.o(g, ctx)
        return (out, weights) if return_weights else out


def multi_head_attention(g, mha: MultiHeadAttention, q, k, mask=None):
    return mha(g, q, k, mask)


def causal_mask(t_q: int, t_k: int, offset: int = 0) -> np.ndarray:
    """``[1, 1, t_q, t_k]``; query i (absolute position offset+i) sees keys <= it."""
    q = np.arange(t_q)[:, None] + offset
    k = np.arange(t_k)[None, :]
    return (k <= q).astype(np.float32)[None, None]


def positional_encoding(length: int, d: int, offset: int = 0) -> np.ndarray:
    """Sinusoidal encodings, sine on even and cosine on odd features."""
    pos = np.arange(offset, offset + length, dtype=np.float64)[:, None]
    i = np.arange(0, d, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, i / d)
    pe = np.zeros((length, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d // 2])
    return pe


class FeedForward:
    def __init__(self, pb, name, d, d_inner):
        self.l1 = Linear(pb, f"{name}.ffn1", d, d_inner)
        self.l2 = Linear(pb, f"{name}.ffn2", d_inner, d)

    def __call__(self, g, x):
        return self.l2(g, ops.relu(self.l1(g, x)))


class TransformerLayer:
    """Encoder or decoder layer with residual sublayers.

    Pre-norm computes ``x + F(LN(x))``; post-norm computes ``LN(x + F(x))``.
    """

    def __init__(self, pb, name, d, heads, kind, d_memory=None, prenorm=True, dropout=0.0):
        if kind not in ("encoder", "decoder"):
            raise ContractError(f"unknown transformer layer kind {kind!r}")
        self.kind, self.prenorm, self.dropout = kind, prenorm, dropout
        self.self_att = MultiHeadAttention(pb, f"{name}.self", d, heads)
        self.ln_self = LayerNorm(pb, f"{name}.ln_self", d)
        if kind == "decoder" and d_memory is not None:
            self.cross_att = MultiHeadAttention(pb, f"{name}.cross", d, heads, d_kv=d_memory)
            self.ln_cross = LayerNorm(pb, f"{name}.ln_cross", d)
        else:
            self.cross_att = None
        self.ffn = FeedForward(pb, name, d, 4 * d)
        self.ln_ffn = LayerNorm(pb, f"{name}.ln_ffn", d)

    def _sublayer(self, g, x, ln, fn):
        if self.prenorm:
            return ops.add(x, ops.dropout(fn(ln(g, x)), self.dropout))
        return ln(g, ops.add(x, ops.dropout(fn(x), self.dropout)))

    def __call__(self, g, x, self_mask=None, history=None, memory=None, memory_mask=None):
        """``history`` holds earlier decoder positions' layer inputs (the cache)."""
        if self.kind == "decoder" and self.cross_att is not None and memory is None:
            raise ContractError("decoder layer needs cross-attention memory")

        def self_fn(h):
            if history is None:
                return self.self_att(g, h, h, self_mask)
            full = ops.concat([history, x], axis=1)
            keys = self.ln_self(g, full) if self.prenorm else full
            return self.self_att(g, h, keys, self_mask)

        x_out = self._sublayer(g, x, self.ln_self, self_fn)
        if self.cross_att is not None:
            x_out = self._sublayer(g, x_out, self.ln_cross,
                                   lambda h: self.cross_att(g, h, memory, memory_mask))
        return self._sublayer(g, x_out, self.ln_ffn, lambda h: self.ffn(g, h))


def transformer_block(g, layer: TransformerLayer, x, **kwargs):
    return layer(g, x, **kwargs)


@dataclass
class AttentionSlot:
    """Attention placed after one block of a deep-transition cell."""

    attentions: list  # one BahdanauAttention per encoder
    fuse: Linear | None  # projects concatenated contexts when there are several


class DeepTransitionCell:
    """A tall recurrent step built from stacked GRU blocks.

    Block 1 reads the external input. When ``attention_after`` is set, the
    attention runs on that block's output and the next block reads the
    context; every other block is transition-only.
    """

    def __init__(self, pb, name, d_in, d, depth, layer_norm=True,
                 context_dims: Sequence[int] = (), attention_after: int | None = None,
                 d_att: int | None = None):
        if depth < 1:
            raise ContractError("a cell needs at least one block")
        if context_dims and attention_after is None:
            raise ContractError("context dims given without an attention slot")
        if attention_after is not None and not 1 <= attention_after < depth:
            raise ContractError(f"attention slot {attention_after} invalid for depth {depth}")
        self.d = d
        self.depth = depth
        self.attention_after = attention_after
        self.slot = None
        ctx_in = None
        if attention_after is not None:
            if not context_dims:
                raise ContractError("attention slot set but no encoder context dims")
            atts = [BahdanauAttention(pb, f"{name}.att{k}" if len(context_dims) > 1 else f"{name}.att",
                                      d, dk, d_att or d, layer_norm)
                    for k, dk in enumerate(context_dims)]
            fuse = Linear(pb, f"{name}.att_fuse", sum(context_dims), d) if len(context_dims) > 1 else None
            self.slot = AttentionSlot(atts, fuse)
            ctx_in = d if fuse else context_dims[0]
        self.context_dim = ctx_in
        self.blocks = []
        for i in range(depth):
            if i == 0:
                block_in = d_in
            elif attention_after is not None and i == attention_after:
                block_in = ctx_in
            else:
                block_in = None
            self.blocks.append(GRUBlock(pb, f"{name}.gru{i + 1}", block_in, d, layer_norm))

    def attend(self, g, query, contexts, masks):
        ctxs, weights = [], []
        for att, (keys, projected), mask in zip(self.slot.attentions, contexts, masks):
            c, w = att(g, query, keys, projected, mask)
            ctxs.append(c)
            weights.append(w)
        if self.slot.fuse is not None:
            return self.slot.fuse(g, ops.concat(ctxs, axis=1)), weights
        return ctxs[0], weights

    def __call__(self, g, x, state, contexts=(), masks=(), context_dropout=None):
        """One recurrent step; returns ``(new_state, context, attention_weights)``.

        ``contexts`` holds ``(keys, projected_keys)`` pairs from
        :meth:`BahdanauAttention.prepare`.
        """
        if self.slot is not None and not contexts:
            raise ContractError("attention slot set but no encoder context supplied")
        s = self.blocks[0](g, state, x)
        context, weights = None, None
        for i in range(1, self.depth):
            if self.slot is not None and i == self.attention_after:
                context, weights = self.attend(g, s, contexts, masks)
                inp = context if context_dropout is None else ops.mul(context, context_dropout)
                s = self.blocks[i](g, s, inp)
            else:
                s = self.blocks[i](g, s)
        return s, context, weights


def deep_transition_step(g, cell: DeepTransitionCell, x, state, contexts=(), masks=()):
    return cell(g, x, state, contexts, masks)
