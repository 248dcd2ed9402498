"""Shared oracles for the test-suite."""
import numpy as np

from mtk.graph import ExpressionGraph


def numeric_grad(f, arrays, eps=1e-4):
    """Central finite differences of scalar ``f(arrays)`` w.r.t. each array."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + eps
            fp = f(arrays)
            a[i] = old - eps
            fm = f(arrays)
            a[i] = old
            g[i] = (fp - fm) / (2 * eps)
        grads.append(g)
    return grads


def graph_grads(build, arrays):
    """Analytic value and gradients of ``build(graph, refs) -> scalar``."""
    g = ExpressionGraph(dtype=np.float64)
    refs = [g.add_parameter(f"p{i}", a) for i, a in enumerate(arrays)]
    loss = build(g, refs)
    g.backward(loss)
    return float(g.value(loss)[0]), [g.grad(r) for r in refs]


def graph_value(build, arrays):
    g = ExpressionGraph(dtype=np.float64)
    refs = [g.add_parameter(f"p{i}", a) for i, a in enumerate(arrays)]
    return float(g.value(build(g, refs))[0])


def max_rel_err(a, b, floor=1e-3):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def gradcheck(build, arrays, eps=1e-4):
    """Largest relative error between analytic and finite-difference grads."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    _, analytic = graph_grads(build, arrays)
    numeric = numeric_grad(lambda arrs: graph_value(build, arrs), arrays, eps)
    return max(max_rel_err(a, n) for a, n in zip(analytic, numeric))
