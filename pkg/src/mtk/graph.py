"""Reverse-mode automatic differentiation over dynamically built graphs.

A graph is rebuilt for every batch: model code calls the functions in
:mod:`mtk.ops`, each of which appends a node holding its forward rule and
backward rule. ``forward`` evaluates pending nodes in construction order and
``backward`` walks them in reverse, accumulating gradients.
"""
from __future__ import annotations

import itertools

import numpy as np

from . import tensor as T
from .errors import ContractError, NumericError, StaleReferenceError

_graph_ids = itertools.count()


class Node:
    __slots__ = ("op", "inputs", "shape", "fwd", "bwd", "value", "grad",
                 "cache", "needs_grad", "name")

    def __init__(self, op, inputs, shape, fwd, bwd, needs_grad, name=None):
        self.op = op
        self.inputs = inputs
        self.shape = shape
        self.fwd = fwd
        self.bwd = bwd
        self.value = None
        self.grad = None
        self.cache = None
        self.needs_grad = needs_grad
        self.name = name


class NodeRef:
    """Handle to a node; becomes stale once its graph is cleared."""

    __slots__ = ("graph", "index", "shape", "generation")

    def __init__(self, graph: "ExpressionGraph", index: int, shape: tuple[int, ...]):
        self.graph = graph
        self.index = index
        self.shape = shape
        self.generation = graph.generation

    def __repr__(self):
        node = self.graph._nodes[self.index] if self.index < len(self.graph._nodes) else None
        op = node.op if node is not None else "?"
        return f"NodeRef({op}#{self.index}, shape={self.shape})"

    @property
    def ndim(self) -> int:
        return len(self.shape)

    def value(self) -> np.ndarray:
        return self.graph.value(self)

    def grad(self) -> np.ndarray:
        return self.graph.grad(self)

    # arithmetic sugar; scalars become affine nodes rather than constants
    def __add__(self, other):
        from . import ops
        if isinstance(other, NodeRef):
            return ops.add(self, other)
        return ops.affine(self, 1.0, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        if isinstance(other, NodeRef):
            return ops.sub(self, other)
        return ops.affine(self, 1.0, -float(other))

    def __rsub__(self, other):
        from . import ops
        return ops.affine(self, -1.0, float(other))

    def __mul__(self, other):
        from . import ops
        if isinstance(other, NodeRef):
            return ops.mul(self, other)
        return ops.affine(self, float(other), 0.0)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        if isinstance(other, NodeRef):
            return ops.div(self, other)
        return ops.affine(self, 1.0 / float(other), 0.0)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


class ExpressionGraph:
    """Append-only computation graph with persistent parameters.

    Parameters are registered first and survive :meth:`clear`; every other
    node is discarded on clear and its buffers go back to the arena.
    """

    def __init__(self, dtype=None, inference: bool = False, seed: int = 0,
                 arena_capacity: int = 1 << 31):
        self.id = next(_graph_ids)
        self.dtype = np.dtype(dtype or T.default_dtype()).type
        self.inference = inference
        self.arena = T.Arena(arena_capacity)
        self.rng = np.random.default_rng(seed)
        self.generation = 0
        self.params: dict[str, NodeRef] = {}
        self._nodes: list[Node] = []
        self._n_params = 0
        self._forwarded = 0

    def __len__(self):
        return len(self._nodes)

    def reseed(self, seed) -> None:
        self.rng = np.random.default_rng(seed)

    # -- construction -----------------------------------------------------
    def add_parameter(self, name: str, value: np.ndarray) -> NodeRef:
        """Register ``value`` (shared, not copied) as a trainable leaf."""
        if len(self._nodes) != self._n_params:
            raise ContractError("parameters must be added before any other node")
        if name in self.params:
            raise ContractError(f"duplicate parameter name {name!r}")
        if value.dtype != self.dtype:
            raise ContractError(f"parameter {name!r} has dtype {value.dtype}, graph uses {np.dtype(self.dtype)}")
        T.check_shape(value.shape)
        node = Node("param", (), value.shape, None, None, needs_grad=True, name=name)
        node.value = value
        node.grad = None if self.inference else np.zeros_like(value)
        self._nodes.append(node)
        self._n_params += 1
        self._forwarded = self._n_params
        ref = NodeRef(self, len(self._nodes) - 1, value.shape)
        self.params[name] = ref
        return ref

    def parameter(self, name: str) -> NodeRef:
        try:
            return self.params[name]
        except KeyError:
            raise ContractError(f"unknown parameter {name!r}") from None

    def constant(self, value, name=None) -> NodeRef:
        value = np.asarray(value, dtype=self.dtype)
        if value.ndim == 0:
            value = value.reshape(1)
        T.check_shape(value.shape)
        return self._append("const", (), value.shape,
                            lambda: (value, None), None, name=name)

    def _append(self, op, inputs, shape, fwd, bwd, name=None) -> NodeRef:
        idx = []
        needs = False
        for ref in inputs:
            self._check_ref(ref)
            idx.append(ref.index)
            needs = needs or self._nodes[ref.index].needs_grad
        node = Node(op, tuple(idx), tuple(shape), fwd, bwd,
                    needs_grad=needs and not self.inference, name=name)
        self._nodes.append(node)
        return NodeRef(self, len(self._nodes) - 1, node.shape)

    def _check_ref(self, ref: NodeRef) -> Node:
        if ref.graph is not self:
            raise ContractError("node belongs to a different graph")
        if ref.index >= self._n_params and ref.generation != self.generation:
            raise StaleReferenceError(f"{ref.index} refers to a cleared graph generation")
        if ref.index >= len(self._nodes):
            raise StaleReferenceError(f"node {ref.index} no longer exists")
        return self._nodes[ref.index]

    # -- evaluation -------------------------------------------------------
    def forward(self) -> None:
        nodes = self._nodes
        for i in range(self._forwarded, len(nodes)):
            node = nodes[i]
            args = [nodes[j].value for j in node.inputs]
            out, node.cache = node.fwd(*args)
            if out.shape != node.shape:
                raise ContractError(f"{node.op}#{i}: produced {out.shape}, declared {node.shape}")
            if not np.all(np.isfinite(out)):
                raise NumericError(f"non-finite value in node {i} (op {node.op!r})")
            buf = self.arena.alloc(out.shape, self.dtype)
            np.copyto(buf, out)
            node.value = buf
        self._forwarded = len(nodes)

    def backward(self, loss: NodeRef) -> None:
        if self.inference:
            raise ContractError("backward() on an inference-mode graph")
        loss_node = self._check_ref(loss)
        if int(np.prod(loss.shape)) != 1:
            raise ContractError(f"loss must be scalar-shaped, got {loss.shape}")
        self.forward()
        nodes = self._nodes
        for node in nodes[self._n_params:loss.index + 1]:
            node.grad = None
        loss_node.grad = np.ones(loss.shape, dtype=self.dtype)
        for i in range(loss.index, self._n_params - 1, -1):
            node = nodes[i]
            if node.grad is None or not node.needs_grad or node.bwd is None:
                continue
            args = [nodes[j].value for j in node.inputs]
            grads = node.bwd(node.grad, node.cache, *args)
            for j, g in zip(node.inputs, grads):
                if g is None:
                    continue
                target = nodes[j]
                if not target.needs_grad:
                    continue
                if not np.all(np.isfinite(g)):
                    raise NumericError(f"non-finite gradient from node {i} (op {node.op!r})")
                if target.grad is None:
                    buf = self.arena.alloc(target.shape, self.dtype)
                    np.copyto(buf, g)
                    target.grad = buf
                else:
                    target.grad += g

    def value(self, ref: NodeRef) -> np.ndarray:
        node = self._check_ref(ref)
        if ref.index >= self._forwarded:
            self.forward()
        return np.array(node.value)

    def grad(self, ref: NodeRef) -> np.ndarray:
        node = self._check_ref(ref)
        if node.grad is None:
            return np.zeros(node.shape, dtype=self.dtype)
        return np.array(node.grad)

    def zero_grads(self) -> None:
        for ref in self.params.values():
            node = self._nodes[ref.index]
            if node.grad is not None:
                node.grad.fill(0)

    def param_grads(self) -> dict[str, np.ndarray]:
        """Live (not copied) gradient buffers of all parameters."""
        return {name: self._nodes[ref.index].grad for name, ref in self.params.items()}

    def clear(self) -> None:
        del self._nodes[self._n_params:]
        self.arena.reset()
        self.generation += 1
        self._forwarded = self._n_params
