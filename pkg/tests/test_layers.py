import numpy as np
import pytest

from helpers import max_rel_err, numeric_grad

from mtk import ops
from mtk.errors import ContractError
from mtk.graph import ExpressionGraph
from mtk.layers import (BahdanauAttention, DeepTransitionCell, GRUBlock, MultiHeadAttention,
                        ParamBuilder, TransformerLayer, causal_mask, positional_encoding)


def make(pb, dtype=np.float64):
    g = ExpressionGraph(dtype=dtype)
    for k, v in pb.params.items():
        g.add_parameter(k, v)
    return g


def test_positional_encoding_values():
    pe = positional_encoding(3, 4)
    assert pe[0].tolist() == [0.0, 1.0, 0.0, 1.0]
    assert pe[2, 0] == pytest.approx(np.sin(2.0))
    assert pe[2, 3] == pytest.approx(np.cos(2.0 / 100.0))
    np.testing.assert_array_equal(positional_encoding(2, 4, offset=1), pe[1:])


def test_causal_mask():
    m = causal_mask(2, 3, offset=1)[0, 0]
    assert m.tolist() == [[1, 1, 0], [1, 1, 1]]


def test_bahdanau_weights_respect_mask():
    pb = ParamBuilder(0, np.float64)
    att = BahdanauAttention(pb, "a", 5, 6, 7, layer_norm=True)
    g = make(pb)
    rng = np.random.default_rng(0)
    keys = g.constant(rng.normal(size=(2, 4, 6)))
    mask = np.array([[1, 1, 1, 1], [1, 1, 0, 0]], np.float64)
    ctx, w = att(g, g.constant(rng.normal(size=(2, 5))), keys, att.prepare(g, keys), mask)
    w = g.value(w)
    np.testing.assert_allclose(w.sum(axis=1), 1.0)
    assert (w[1, 2:] == 0).all()
    np.testing.assert_allclose(g.value(ctx), np.einsum("bs,bsd->bd", w, g.value(keys)))


def test_multi_head_shapes_and_mask():
    pb = ParamBuilder(0, np.float64)
    mha = MultiHeadAttention(pb, "m", 8, 2)
    g = make(pb)
    rng = np.random.default_rng(1)
    q = g.constant(rng.normal(size=(2, 3, 8)))
    mem = g.constant(rng.normal(size=(2, 5, 8)))
    mask = np.ones((2, 1, 1, 5))
    mask[1, ..., 3:] = 0
    out, w = mha(g, q, mem, mask, return_weights=True)
    assert out.shape == (2, 3, 8)
    w = g.value(w)
    assert w.shape == (2, 2, 3, 5)
    np.testing.assert_allclose(w.sum(-1), 1.0)
    assert (w[1, ..., 3:] == 0).all()


def test_gru_block_transition_only():
    pb = ParamBuilder(0, np.float64)
    blk = GRUBlock(pb, "g", None, 4, layer_norm=True)
    assert "g.W" not in pb.params and "g.ln_x.gain" not in pb.params
    g = make(pb)
    out = blk(g, g.constant(np.zeros((3, 4))))
    assert out.shape == (3, 4)


def test_deep_transition_rejects_bad_slot():
    with pytest.raises(ContractError):
        DeepTransitionCell(ParamBuilder(), "c", 4, 4, 1, context_dims=[4], attention_after=1)
    with pytest.raises(ContractError):
        DeepTransitionCell(ParamBuilder(), "c", 4, 4, 0)


def test_decoder_layer_cache_matches_full():
    """Feeding positions one by one with the history cache equals the causal full pass."""
    pb = ParamBuilder(3, np.float64)
    layer = TransformerLayer(pb, "l", 8, 2, "decoder")
    g = make(pb)
    x = np.random.default_rng(2).normal(size=(2, 4, 8))
    full = g.value(layer(g, g.constant(x), self_mask=causal_mask(4, 4)))
    hist = None
    for t in range(4):
        xt = g.constant(x[:, t:t + 1])
        out = layer(g, xt, self_mask=causal_mask(1, t + 1, offset=t), history=hist)
        np.testing.assert_allclose(g.value(out)[:, 0], full[:, t], atol=1e-12)
        hist = xt if hist is None else ops.concat([hist, xt], axis=1)


@pytest.mark.parametrize("prenorm", [True, False])
def test_transformer_layer_gradcheck(prenorm):
    pb = ParamBuilder(4, np.float64)
    layer = TransformerLayer(pb, "l", 4, 2, "encoder", prenorm=prenorm)
    x = np.random.default_rng(3).normal(size=(1, 3, 4))

    def loss(_):
        g = make(pb)
        return float(g.value(ops.sum_all(ops.tanh(layer(g, g.constant(x)))))[0])

    g = make(pb)
    out = ops.sum_all(ops.tanh(layer(g, g.constant(x))))
    g.backward(out)
    name = "l.ffn1.W"
    analytic = g.param_grads()[name]
    numeric = numeric_grad(loss, [pb.params[name]])[0]
    assert max_rel_err(analytic, numeric) < 1e-4
