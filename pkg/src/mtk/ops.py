"""Differentiable operators.

Every function takes :class:`~mtk.graph.NodeRef` operands, checks shapes
eagerly and appends one node. Forward rules return ``(value, cache)``;
backward rules receive the output gradient, the cache and the input values
and return one gradient (or ``None``) per input.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .graph import NodeRef

LN_EPS = 1e-9


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _graph(*refs):
    g = refs[0].graph
    for r in refs[1:]:
        if r.graph is not g:
            raise ContractError("operands belong to different graphs")
    return g


# -- element-wise ---------------------------------------------------------

def _binary(op, a: NodeRef, b: NodeRef, bwd):
    shape = T.broadcast_shape(a.shape, b.shape)
    g = _graph(a, b)
    return g._append(op, (a, b), shape, lambda x, y: (T.ewise(op, x, y), None), bwd)


def add(a: NodeRef, b: NodeRef) -> NodeRef:
    return _binary("add", a, b, lambda go, c, x, y: (_unbroadcast(go, x.shape),
                                                      _unbroadcast(go, y.shape)))


def sub(a: NodeRef, b: NodeRef) -> NodeRef:
    return _binary("sub", a, b, lambda go, c, x, y: (_unbroadcast(go, x.shape),
                                                      _unbroadcast(-go, y.shape)))


def mul(a: NodeRef, b: NodeRef) -> NodeRef:
    return _binary("mul", a, b, lambda go, c, x, y: (_unbroadcast(go * y, x.shape),
                                                      _unbroadcast(go * x, y.shape)))


def div(a: NodeRef, b: NodeRef) -> NodeRef:
    return _binary("div", a, b, lambda go, c, x, y: (_unbroadcast(go / y, x.shape),
                                                      _unbroadcast(-go * x / (y * y), y.shape)))


def affine(x: NodeRef, scale: float, shift: float = 0.0) -> NodeRef:
    """``scale * x + shift`` for Python scalars."""
    return x.graph._append(
        "affine", (x,), x.shape,
        lambda v: (v * v.dtype.type(scale) + v.dtype.type(shift), None),
        lambda go, c, v: (go * go.dtype.type(scale),))


def _unary(op, x: NodeRef, bwd):
    return x.graph._append(op, (x,), x.shape, lambda v: (T.ewise(op, v), None), bwd)


def neg(x):
    return _unary("neg", x, lambda go, c, v: (-go,))


def tanh(x):
    def fwd(v):
        y = np.tanh(v)
        return y, y
    return x.graph._append("tanh", (x,), x.shape, fwd,
                           lambda go, y, v: (go * (1 - y * y),))


def sigmoid(x):
    def fwd(v):
        y = T.sigmoid(v)
        return y, y
    return x.graph._append("sigmoid", (x,), x.shape, fwd,
                           lambda go, y, v: (go * y * (1 - y),))


def relu(x):
    return _unary("relu", x, lambda go, c, v: (go * (v > 0),))


def exp(x):
    def fwd(v):
        y = np.exp(v)
        return y, y
    return x.graph._append("exp", (x,), x.shape, fwd, lambda go, y, v: (go * y,))


def log(x):
    return _unary("log", x, lambda go, c, v: (go / v,))


def straight_through(x: NodeRef, threshold: float = 0.5) -> NodeRef:
    """Hard 0/1 decision forward, identity gradient backward."""
    return x.graph._append(
        "straight_through", (x,), x.shape,
        lambda v: ((v > threshold).astype(v.dtype), None),
        lambda go, c, v: (go,))


# -- linear algebra and shape ---------------------------------------------

def matmul(a: NodeRef, b: NodeRef) -> NodeRef:
    shape = T.matmul_shape(a.shape, b.shape)

    def bwd(go, c, x, y):
        if y.ndim == 2 and x.ndim > 2:
            k = x.shape[-1]
            dy = x.reshape(-1, k).T @ go.reshape(-1, go.shape[-1])
        else:
            dy = _unbroadcast(np.swapaxes(x, -1, -2) @ go, y.shape)
        dx = _unbroadcast(go @ np.swapaxes(y, -1, -2), x.shape)
        return dx, dy

    return _graph(a, b)._append("matmul", (a, b), shape,
                                lambda x, y: (T.matmul(x, y), None), bwd)


def transpose(x: NodeRef, axes: Sequence[int]) -> NodeRef:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"bad permutation {axes} for shape {x.shape}")
    inverse = tuple(np.argsort(axes))
    shape = tuple(x.shape[a] for a in axes)
    return x.graph._append(
        "transpose", (x,), shape,
        lambda v: (np.ascontiguousarray(v.transpose(axes)), None),
        lambda go, c, v: (go.transpose(inverse),))


def reshape(x: NodeRef, shape: Sequence[int]) -> NodeRef:
    shape = tuple(int(d) for d in shape)
    if -1 in shape:
        known = int(np.prod([d for d in shape if d != -1]))
        shape = tuple(int(np.prod(x.shape)) // known if d == -1 else d for d in shape)
    T.check_shape(shape)
    if int(np.prod(shape)) != int(np.prod(x.shape)):
        raise DimensionError(f"cannot reshape {x.shape} to {shape}")
    return x.graph._append("reshape", (x,), shape,
                           lambda v: (v.reshape(shape), None),
                           lambda go, c, v: (go.reshape(v.shape),))


def _reduced_shape(shape, axis, keepdims):
    if not 0 <= axis < len(shape):
        raise ContractError(f"axis {axis} out of range for shape {shape}")
    if keepdims:
        return shape[:axis] + (1,) + shape[axis + 1:]
    out = shape[:axis] + shape[axis + 1:]
    return out or (1,)


def sum(x: NodeRef, axis: int, keepdims: bool = False) -> NodeRef:  # noqa: A001
    shape = _reduced_shape(x.shape, axis, keepdims)

    def bwd(go, c, v):
        go = go.reshape(_reduced_shape(v.shape, axis, True))
        return (np.broadcast_to(go, v.shape),)

    return x.graph._append("sum", (x,), shape,
                           lambda v: (T.reduce("sum", v, axis, keepdims).reshape(shape), None), bwd)


def mean(x: NodeRef, axis: int, keepdims: bool = False) -> NodeRef:
    n = x.shape[axis] if 0 <= axis < x.ndim else 1
    return affine(sum(x, axis, keepdims), 1.0 / n)


def sum_all(x: NodeRef) -> NodeRef:
    return x.graph._append("sum_all", (x,), (1,),
                           lambda v: (v.sum().reshape(1), None),
                           lambda go, c, v: (np.broadcast_to(go.reshape(()), v.shape),))


def softmax(x: NodeRef, mask: np.ndarray | None = None) -> NodeRef:
    if mask is not None:
        mask = np.asarray(mask)
        T.broadcast_shape(mask.shape, x.shape)

    def fwd(v):
        y = T.softmax(v, mask)
        return y, y

    def bwd(go, y, v):
        return (y * (go - (go * y).sum(axis=-1, keepdims=True)),)

    return x.graph._append("softmax", (x,), x.shape, fwd, bwd)


def log_softmax(x: NodeRef, mask: np.ndarray | None = None) -> NodeRef:
    if mask is not None:
        mask = np.asarray(mask)
        T.broadcast_shape(mask.shape, x.shape)

    def fwd(v):
        y = T.log_softmax(v, mask)
        p = np.exp(y)
        # masked slots hold -inf; report a large finite value instead
        return np.where(np.isfinite(y), y, np.finfo(v.dtype).min / 4), p

    def bwd(go, p, v):
        if mask is not None:
            go = go * (np.broadcast_to(mask, v.shape) > 0)
        return (go - p * go.sum(axis=-1, keepdims=True),)

    return x.graph._append("log_softmax", (x,), x.shape, fwd, bwd)


def concat(xs: Sequence[NodeRef], axis: int) -> NodeRef:
    xs = list(xs)
    g = _graph(*xs)
    nd = xs[0].ndim
    axis = axis % nd
    base = xs[0].shape
    for x in xs[1:]:
        if x.ndim != nd or any(x.shape[i] != base[i] for i in range(nd) if i != axis):
            raise DimensionError(f"concat shape mismatch: {[x.shape for x in xs]}")
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]
    shape = base[:axis] + (_isum(x.shape[axis] for x in xs),) + base[axis + 1:]
    return g._append("concat", tuple(xs), shape,
                     lambda *vs: (np.concatenate(vs, axis=axis), None),
                     lambda go, c, *vs: tuple(np.split(go, splits, axis=axis)))


def _isum(values) -> int:
    total = 0
    for v in values:
        total += v
    return total


def stack(xs: Sequence[NodeRef], axis: int) -> NodeRef:
    xs = list(xs)
    g = _graph(*xs)
    base = xs[0].shape
    for x in xs[1:]:
        if x.shape != base:
            raise DimensionError(f"stack shape mismatch: {[x.shape for x in xs]}")
    axis = axis % (len(base) + 1)
    shape = base[:axis] + (len(xs),) + base[axis:]
    T.check_shape(shape)
    return g._append("stack", tuple(xs), shape,
                     lambda *vs: (np.stack(vs, axis=axis), None),
                     lambda go, c, *vs: tuple(np.take(go, i, axis=axis) for i in range(len(vs))))


def select(x: NodeRef, axis: int, index: int) -> NodeRef:
    """Take one slice along ``axis``, dropping that axis."""
    axis = axis % x.ndim
    if not 0 <= index < x.shape[axis]:
        raise ContractError(f"index {index} out of range for axis {axis} of {x.shape}")
    shape = x.shape[:axis] + x.shape[axis + 1:]
    if not shape:
        shape = (1,)

    def bwd(go, c, v):
        out = np.zeros(v.shape, dtype=go.dtype)
        sl = [slice(None)] * v.ndim
        sl[axis] = index
        out[tuple(sl)] = go.reshape(out[tuple(sl)].shape)
        return (out,)

    return x.graph._append("select", (x,), shape,
                           lambda v: (np.take(v, index, axis=axis).reshape(shape), None), bwd)


def narrow(x: NodeRef, axis: int, start: int, length: int) -> NodeRef:
    axis = axis % x.ndim
    if start < 0 or length < 1 or start + length > x.shape[axis]:
        raise ContractError(f"narrow [{start}, {start + length}) out of range for {x.shape}")
    shape = x.shape[:axis] + (length,) + x.shape[axis + 1:]
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def bwd(go, c, v):
        out = np.zeros(v.shape, dtype=go.dtype)
        out[sl] = go
        return (out,)

    return x.graph._append("narrow", (x,), shape, lambda v: (v[sl], None), bwd)


def rows(x: NodeRef, indices) -> NodeRef:
    """Gather along axis 0 (beam reordering)."""
    indices = np.asarray(indices, dtype=np.int64).reshape(-1)
    if indices.size == 0:
        raise ContractError("rows() needs at least one index")
    if indices.min() < 0 or indices.max() >= x.shape[0]:
        raise ContractError(f"row index out of range for {x.shape[0]} rows")
    shape = (len(indices),) + x.shape[1:]

    def bwd(go, c, v):
        out = np.zeros(v.shape, dtype=go.dtype)
        np.add.at(out, indices, go)
        return (out,)

    return x.graph._append("rows", (x,), shape, lambda v: (v[indices], None), bwd)


def embedding(table: NodeRef, ids) -> NodeRef:
    """Look up rows of ``table``; negative ids yield zero vectors."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and ids.max() >= table.shape[0]:
        raise ContractError(f"token id {int(ids.max())} outside vocabulary of {table.shape[0]}")
    shape = ids.shape + table.shape[1:]
    T.check_shape(shape)
    flat = ids.reshape(-1)
    present = flat >= 0
    safe = np.where(present, flat, 0)

    def fwd(v):
        out = v[safe] * present[:, None].astype(v.dtype)
        return out.reshape(shape), None

    def bwd(go, c, v):
        out = np.zeros(v.shape, dtype=go.dtype)
        np.add.at(out, flat[present], go.reshape(-1, v.shape[1])[present])
        return (out,)

    return table.graph._append("embedding", (table,), shape, fwd, bwd)


# -- fused operators ------------------------------------------------------

def _ln_forward(x, gain, bias, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return gain * xhat + bias, (xhat, inv)


def _ln_backward(dy, gain, cache):
    xhat, inv = cache
    dxhat = dy * gain
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    d = dy.shape[-1]
    dgain = (dy * xhat).reshape(-1, d).sum(axis=0)
    dbias = dy.reshape(-1, d).sum(axis=0)
    return dx, dgain, dbias


def layer_norm(x: NodeRef, gain: NodeRef, bias: NodeRef, eps: float = LN_EPS) -> NodeRef:
    d = x.shape[-1]
    if d < 2:
        raise DimensionError("layer_norm needs a last dimension of at least 2")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm gain/bias must be ({d},), got {gain.shape}/{bias.shape}")

    def fwd(v, gv, bv):
        return _ln_forward(v, gv, bv, v.dtype.type(eps))

    def bwd(go, cache, v, gv, bv):
        return _ln_backward(go, gv, cache)

    return _graph(x, gain, bias)._append("layer_norm", (x, gain, bias), x.shape, fwd, bwd)


def gru_cell(state: NodeRef, inp: NodeRef | None, W: NodeRef | None, U: NodeRef,
             b: NodeRef, ln: Sequence[NodeRef] | None = None) -> NodeRef:
    """One fused GRU block.

    ``W`` is ``[e, 3d]`` and ``U`` is ``[d, 3d]`` with columns ordered
    (update, reset, candidate). ``ln`` holds six ``[d]`` vectors (gain, bias)
    for the update pre-activation, the reset pre-activation and the
    candidate's input projection. Without ``inp`` the block is
    transition-only: ``W`` is unused and four norm vectors suffice.
    """
    bsz, d = state.shape
    if U.shape != (d, 3 * d) or b.shape != (3 * d,):
        raise DimensionError(f"GRU weights do not match state dim {d}: U{U.shape} b{b.shape}")
    has_x = inp is not None
    if has_x:
        if W is None or inp.ndim != 2 or inp.shape[0] != bsz or W.shape != (inp.shape[1], 3 * d):
            raise DimensionError(f"GRU input {inp.shape} does not match W "
                                 f"{None if W is None else W.shape} / state {state.shape}")
    use_ln = ln is not None
    if use_ln:
        ln = list(ln)
        if not has_x:
            ln = ln[:4]
        if len(ln) != (6 if has_x else 4) or any(p.shape != (d,) for p in ln):
            raise DimensionError("GRU layer norm expects (gain, bias) vectors of size d per gate")
    inputs = [state, U, b] + ([inp, W] if has_x else []) + (ln if use_ln else [])

    def fwd(h, Uv, bv, *rest):
        if has_x:
            x, Wv, *lnv = rest
            xw = x @ Wv
        else:
            lnv = list(rest)
            xw = None
        hu = h @ Uv
        az = hu[:, :d] + bv[:d]
        ar = hu[:, d:2 * d] + bv[d:2 * d]
        hh = hu[:, 2 * d:]
        xx = None
        if has_x:
            az = az + xw[:, :d]
            ar = ar + xw[:, d:2 * d]
            xx = xw[:, 2 * d:]
        lnc = [None, None, None]
        if use_ln:
            nz, lnc[0] = _ln_forward(az, lnv[0], lnv[1], h.dtype.type(LN_EPS))
            nr, lnc[1] = _ln_forward(ar, lnv[2], lnv[3], h.dtype.type(LN_EPS))
            if has_x:
                nx, lnc[2] = _ln_forward(xx, lnv[4], lnv[5], h.dtype.type(LN_EPS))
        else:
            nz, nr, nx = az, ar, xx
        z = T.sigmoid(nz)
        r = T.sigmoid(nr)
        pre = r * hh + bv[2 * d:]
        if has_x:
            pre = pre + nx
        c = np.tanh(pre)
        out = (1 - z) * c + z * h
        return out, (z, r, c, hh, lnc)

    def bwd(go, cache, h, Uv, bv, *rest):
        z, r, c, hh, lnc = cache
        if has_x:
            x, Wv, *lnv = rest
        else:
            lnv = list(rest)
        dz = go * (h - c)
        dpre = go * (1 - z) * (1 - c * c)
        dh = go * z
        dhh = dpre * r
        dnr = dpre * hh * r * (1 - r)
        dnz = dz * z * (1 - z)
        dln = []
        if use_ln:
            daz, dg1, db1 = _ln_backward(dnz, lnv[0], lnc[0])
            dar, dg2, db2 = _ln_backward(dnr, lnv[2], lnc[1])
            dln = [dg1, db1, dg2, db2]
            if has_x:
                dxx, dg3, db3 = _ln_backward(dpre, lnv[4], lnc[2])
                dln += [dg3, db3]
        else:
            daz, dar, dxx = dnz, dnr, dpre
        dhu = np.concatenate([daz, dar, dhh], axis=1)
        db = np.concatenate([daz.sum(axis=0), dar.sum(axis=0), dpre.sum(axis=0)])
        dU = h.T @ dhu
        dh = dh + dhu @ Uv.T
        grads = [dh, dU, db]
        if has_x:
            dxw = np.concatenate([daz, dar, dxx], axis=1)
            grads += [dxw @ Wv.T, x.T @ dxw]
        return tuple(grads + dln)

    return _graph(*inputs)._append("gru_cell", tuple(inputs), (bsz, d), fwd, bwd)


def cross_entropy(logits: NodeRef, targets, mask=None, normalizer: float | None = None) -> NodeRef:
    """Masked token-level cross-entropy, divided by ``normalizer``.

    ``normalizer`` defaults to the number of unmasked positions.
    """
    targets = np.asarray(targets, dtype=np.int64)
    V = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise DimensionError(f"targets {targets.shape} do not match logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise ContractError(f"target id outside vocabulary of {V}")
    mask = np.ones(targets.shape) if mask is None else np.asarray(mask)
    if mask.shape != targets.shape:
        raise DimensionError(f"mask {mask.shape} does not match targets {targets.shape}")
    norm = float(mask.sum()) if normalizer is None else float(normalizer)
    if norm <= 0:
        raise ContractError("cross_entropy over zero tokens")

    def fwd(v):
        m = mask.astype(v.dtype)
        lse = T.logsumexp(v)
        picked = np.take_along_axis(v, targets[..., None], axis=-1)[..., 0]
        loss = ((lse - picked) * m).sum() / v.dtype.type(norm)
        return np.asarray(loss, dtype=v.dtype).reshape(1), (lse, m)

    def bwd(go, cache, v):
        lse, m = cache
        p = np.exp(v - lse[..., None])
        np.put_along_axis(p, targets[..., None],
                          np.take_along_axis(p, targets[..., None], axis=-1) - 1, axis=-1)
        return (p * (m / v.dtype.type(norm))[..., None] * go.reshape(()),)

    return logits.graph._append("cross_entropy", (logits,), (1,), fwd, bwd)


def dropout_mask(rng: np.random.Generator, shape, p: float, variational_axis=None, dtype=np.float32):
    shape = list(shape)
    if variational_axis is not None:
        shape[variational_axis] = 1
    keep = rng.random(shape) >= p
    return keep.astype(dtype) / dtype(1 - p)


def dropout(x: NodeRef, p: float, variational_axis: int | None = None) -> NodeRef:
    """Inverted dropout; with ``variational_axis`` one mask is shared along it."""
    if not 0 <= p < 1:
        raise ContractError(f"dropout probability must be in [0, 1), got {p}")
    g = x.graph
    if p == 0 or g.inference:
        return x
    mask = dropout_mask(g.rng, x.shape, p, variational_axis, g.dtype)
    return mul(x, g.constant(mask))


def linear(x: NodeRef, W: NodeRef, b: NodeRef | None = None) -> NodeRef:
    y = matmul(x, W)
    return y if b is None else add(y, b)
