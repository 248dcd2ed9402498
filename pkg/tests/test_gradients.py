"""Finite-difference checks for every differentiable operator (float64)."""
import numpy as np
import pytest

from mtk import ops
from mtk.graph import ExpressionGraph
from helpers import gradcheck, max_rel_err

N_INSTANCES = 20
TOL = 1e-4


def weighted(g, out, seed):
    w = np.random.default_rng(seed).normal(size=out.shape)
    return ops.sum_all(out * g.constant(w))


def _normal(rng, *shape):
    return rng.normal(size=shape)


def _positive(rng, *shape):
    return rng.uniform(0.5, 2.0, size=shape)


def _away_from_zero(rng, *shape):
    x = rng.uniform(0.2, 1.5, size=shape)
    return x * rng.choice([-1, 1], size=shape)


# name -> (inputs factory, builder)
CASES = {
    "add": (lambda r: [_normal(r, 3, 4), _normal(r, 4)], lambda g, p: ops.add(*p)),
    "sub": (lambda r: [_normal(r, 3, 1), _normal(r, 3, 4)], lambda g, p: ops.sub(*p)),
    "mul": (lambda r: [_normal(r, 2, 3, 4), _normal(r, 3, 1)], lambda g, p: ops.mul(*p)),
    "div": (lambda r: [_normal(r, 3, 4), _away_from_zero(r, 4)], lambda g, p: ops.div(*p)),
    "affine": (lambda r: [_normal(r, 5)], lambda g, p: ops.affine(p[0], -1.7, 0.3)),
    "neg": (lambda r: [_normal(r, 5)], lambda g, p: ops.neg(p[0])),
    "tanh": (lambda r: [_normal(r, 3, 4)], lambda g, p: ops.tanh(p[0])),
    "sigmoid": (lambda r: [_normal(r, 3, 4)], lambda g, p: ops.sigmoid(p[0])),
    "relu": (lambda r: [_away_from_zero(r, 3, 4)], lambda g, p: ops.relu(p[0])),
    "exp": (lambda r: [_normal(r, 3, 4)], lambda g, p: ops.exp(p[0])),
    "log": (lambda r: [_positive(r, 3, 4)], lambda g, p: ops.log(p[0])),
    "matmul": (lambda r: [_normal(r, 3, 4), _normal(r, 4, 2)], lambda g, p: ops.matmul(*p)),
    "matmul_3d_2d": (lambda r: [_normal(r, 2, 3, 4), _normal(r, 4, 2)], lambda g, p: ops.matmul(*p)),
    "matmul_batched": (lambda r: [_normal(r, 2, 2, 3, 4), _normal(r, 2, 1, 4, 3)],
                       lambda g, p: ops.matmul(*p)),
    "transpose": (lambda r: [_normal(r, 2, 3, 4)], lambda g, p: ops.transpose(p[0], (2, 0, 1))),
    "reshape": (lambda r: [_normal(r, 2, 6)], lambda g, p: ops.reshape(p[0], (3, -1))),
    "sum": (lambda r: [_normal(r, 2, 3, 4)], lambda g, p: ops.sum(p[0], 1)),
    "mean": (lambda r: [_normal(r, 2, 3, 4)], lambda g, p: ops.mean(p[0], 2, keepdims=True)),
    "sum_all": (lambda r: [_normal(r, 3, 4)], lambda g, p: ops.sum_all(ops.tanh(p[0]))),
    "softmax": (lambda r: [_normal(r, 3, 5)], lambda g, p: ops.softmax(p[0])),
    "softmax_masked": (lambda r: [_normal(r, 3, 5)],
                       lambda g, p: ops.softmax(p[0], np.array([[1, 1, 0, 1, 0]] * 3))),
    "log_softmax": (lambda r: [_normal(r, 2, 3, 5)], lambda g, p: ops.log_softmax(p[0])),
    "concat": (lambda r: [_normal(r, 2, 3), _normal(r, 2, 2)], lambda g, p: ops.concat(p, axis=1)),
    "stack": (lambda r: [_normal(r, 2, 3), _normal(r, 2, 3)], lambda g, p: ops.stack(p, axis=1)),
    "select": (lambda r: [_normal(r, 2, 4, 3)], lambda g, p: ops.select(p[0], 1, 2)),
    "narrow": (lambda r: [_normal(r, 2, 5, 3)], lambda g, p: ops.narrow(p[0], 1, 1, 3)),
    "rows": (lambda r: [_normal(r, 4, 3)], lambda g, p: ops.rows(p[0], [3, 1, 1, 0, 3])),
    "embedding": (lambda r: [_normal(r, 6, 3)],
                  lambda g, p: ops.embedding(p[0], np.array([[0, 5, 2], [2, -1, 2]]))),
    "layer_norm": (lambda r: [_normal(r, 4, 8), 1 + 0.1 * _normal(r, 8), _normal(r, 8)],
                   lambda g, p: ops.layer_norm(*p)),
    "dropout": (lambda r: [_normal(r, 3, 6)], lambda g, p: ops.dropout(p[0], 0.3, variational_axis=0)),
    "cross_entropy": (lambda r: [_normal(r, 2, 3, 5)],
                      lambda g, p: ops.cross_entropy(p[0], np.array([[0, 4, 2], [1, 1, 3]]),
                                                     np.array([[1, 1, 1], [1, 1, 0]]))),
}


def _gru_inputs(rng, with_x, ln, b=3, e=4, d=5):
    arrays = [_normal(rng, b, d), 0.5 * _normal(rng, d, 3 * d), 0.5 * _normal(rng, 3 * d)]
    if with_x:
        arrays += [_normal(rng, b, e), 0.5 * _normal(rng, e, 3 * d)]
    if ln:
        for _ in range(3 if with_x else 2):
            arrays += [1 + 0.1 * _normal(rng, d), 0.1 * _normal(rng, d)]
    return arrays


def _gru_builder(with_x, ln):
    def build(g, p):
        h, U, b = p[:3]
        rest = p[3:]
        x = W = None
        if with_x:
            x, W, *rest = rest
        lnp = list(rest) if ln else None
        return ops.gru_cell(h, x, W, U, b, lnp)
    return build


for _x in (True, False):
    for _ln in (True, False):
        CASES[f"gru_cell_x{int(_x)}_ln{int(_ln)}"] = (
            (lambda r, _x=_x, _ln=_ln: _gru_inputs(r, _x, _ln)), _gru_builder(_x, _ln))


@pytest.mark.parametrize("name", sorted(CASES))
def test_gradient_matches_finite_differences(name):
    factory, build = CASES[name]
    worst = 0.0
    for seed in range(N_INSTANCES):
        arrays = factory(np.random.default_rng(seed))
        err = gradcheck(lambda g, p: weighted(g, build(g, p), 1000 + seed), arrays)
        worst = max(worst, err)
    assert worst < TOL, f"{name}: relative error {worst:.2e}"


# -- unfused oracles -----------------------------------------------------

def unfused_layer_norm(x, gain, bias, eps=1e-9):
    d = x.shape[-1]
    mu = ops.mean(x, x.ndim - 1, keepdims=True)
    xc = x - mu
    var = ops.mean(xc * xc, x.ndim - 1, keepdims=True)
    std = ops.exp(ops.affine(ops.log(ops.affine(var, 1.0, eps)), 0.5))
    return ops.add(ops.mul(ops.div(xc, std), gain), bias)


def unfused_gru(h, x, W, U, b, ln):
    d = h.shape[1]
    hu = h @ U
    col = lambda t, k: ops.narrow(t, 1, k * d, d)  # noqa: E731
    bz, br, bh = (ops.narrow(b, 0, k * d, d) for k in range(3))
    az = col(hu, 0) + bz
    ar = col(hu, 1) + br
    xx = None
    if x is not None:
        xw = x @ W
        az = az + col(xw, 0)
        ar = ar + col(xw, 1)
        xx = col(xw, 2)
    if ln is not None:
        az = unfused_layer_norm(az, ln[0], ln[1])
        ar = unfused_layer_norm(ar, ln[2], ln[3])
        if xx is not None:
            xx = unfused_layer_norm(xx, ln[4], ln[5])
    z = ops.sigmoid(az)
    r = ops.sigmoid(ar)
    pre = r * col(hu, 2) + bh
    if xx is not None:
        pre = pre + xx
    c = ops.tanh(pre)
    return (1.0 - z) * c + z * h


def unfused_cross_entropy(logits, targets, mask):
    V = logits.shape[-1]
    onehot = np.eye(V)[targets] * mask[..., None]
    return ops.affine(ops.sum_all(ops.log_softmax(logits) * logits.graph.constant(onehot)),
                      -1.0 / mask.sum())


def _compare(fused, unfused, arrays):
    out = []
    for build in (fused, unfused):
        g = ExpressionGraph(dtype=np.float64)
        refs = [g.add_parameter(f"p{i}", a.copy()) for i, a in enumerate(arrays)]
        loss = build(g, refs)
        g.backward(loss)
        out.append((g.value(loss), [g.grad(r) for r in refs]))
    (v1, g1), (v2, g2) = out
    assert np.max(np.abs(v1 - v2)) < 1e-5
    for a, b in zip(g1, g2):
        assert np.max(np.abs(a - b)) < 1e-5


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("with_x,ln", [(True, True), (True, False), (False, True), (False, False)])
def test_gru_fused_matches_unfused(seed, with_x, ln):
    arrays = _gru_inputs(np.random.default_rng(seed), with_x, ln)

    def split(p):
        h, U, b, *rest = p
        x = W = None
        if with_x:
            x, W, *rest = rest
        return h, x, W, U, b, (list(rest) if ln else None)

    def fused(g, p):
        h, x, W, U, b, lnp = split(p)
        return weighted(g, ops.gru_cell(h, x, W, U, b, lnp), seed)

    def unfused(g, p):
        return weighted(g, unfused_gru(*split(p)), seed)

    _compare(fused, unfused, arrays)


@pytest.mark.parametrize("seed", range(10))
def test_layer_norm_fused_matches_unfused(seed):
    rng = np.random.default_rng(seed)
    arrays = [rng.normal(size=(4, 8)), 1 + 0.1 * rng.normal(size=8), rng.normal(size=8)]
    _compare(lambda g, p: weighted(g, ops.layer_norm(*p), seed),
             lambda g, p: weighted(g, unfused_layer_norm(*p), seed), arrays)


@pytest.mark.parametrize("seed", range(10))
def test_cross_entropy_fused_matches_unfused(seed):
    rng = np.random.default_rng(seed)
    targets = rng.integers(0, 5, size=(2, 3))
    mask = np.array([[1, 1, 1], [1, 1, 0]], dtype=np.float64)
    _compare(lambda g, p: ops.cross_entropy(p[0], targets, mask),
             lambda g, p: unfused_cross_entropy(p[0], targets, mask),
             [rng.normal(size=(2, 3, 5))])


def test_fused_op_examples():
    g = ExpressionGraph(dtype=np.float64)
    d = 2
    U = g.add_parameter("U", np.zeros((d, 3 * d)))
    b = g.add_parameter("b", np.zeros(3 * d))
    W = g.add_parameter("W", np.zeros((3, 3 * d)))
    x = g.constant(np.ones((1, 3)))
    assert not g.value(ops.gru_cell(g.constant(np.zeros((1, d))), x, W, U, b)).any()
    np.testing.assert_array_equal(g.value(ops.gru_cell(g.constant(np.ones((1, d))), x, W, U, b)), [[0.5, 0.5]])

    one, zero = g.constant(np.ones(3)), g.constant(np.zeros(3))
    np.testing.assert_array_equal(g.value(ops.layer_norm(g.constant([[5.0, 5, 5]]), one, zero)), [[0, 0, 0]])
    np.testing.assert_allclose(g.value(ops.layer_norm(g.constant([[1.0, 2, 3]]), one, zero)),
                               [[-1.22474, 0, 1.22474]], atol=1e-4)

    ce = ops.cross_entropy(g.constant(np.zeros((1, 1, 4))), np.array([[2]]), np.ones((1, 1)))
    assert abs(g.value(ce)[0] - np.log(4)) < 1e-12
    logits = np.zeros((1, 1, 4))
    logits[0, 0, 1] = 1000.0
    ce = ops.cross_entropy(g.constant(logits), np.array([[1]]), np.ones((1, 1)))
    assert g.value(ce)[0] < 1e-12


def test_cross_entropy_rejects_out_of_vocab():
    g = ExpressionGraph()
    with pytest.raises(Exception, match="vocabulary"):
        ops.cross_entropy(g.constant(np.zeros((1, 2, 3))), np.array([[0, 3]]))


def test_rel_err_helper():
    assert max_rel_err([1.0], [1.0]) == 0.0
