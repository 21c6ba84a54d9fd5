"""Matrix-valued reverse-mode automatic differentiation.

Matrices are plain 2-D float64 numpy arrays. A :class:`DiffNode` wraps one
matrix together with its gradient and the operation that produced it, so a
scalar loss can be backpropagated to every parameter with a single
:func:`backward` call. The engine is deliberately small: dense float64,
no broadcasting beyond explicit bias rows, no views.

Gradients accumulate additively across fan-out and across repeated
backward calls; callers zero them between optimization steps.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


def as_matrix(values, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Coerce to a C-contiguous 2-D float64 array, checking finiteness."""
    m = np.ascontiguousarray(values, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got ndim={m.ndim}")
    if rows is not None and m.shape[0] != rows:
        raise ValueError(f"expected {rows} rows, got {m.shape[0]}")
    if cols is not None and m.shape[1] != cols:
        raise ValueError(f"expected {cols} cols, got {m.shape[1]}")
    if not np.isfinite(m).all():
        raise FloatingPointError("matrix contains non-finite entries")
    return m


class DiffNode:
    """One node of the computation graph: a value, its gradient, and parents."""

    __slots__ = ("value", "grad", "_parents", "_backward", "name")

    def __init__(
        self,
        value: np.ndarray,
        parents: tuple["DiffNode", ...] = (),
        backward: Callable[[np.ndarray], None] | None = None,
        name: str = "",
    ):
        self.value = value
        self.grad: np.ndarray | None = None
        self._parents = parents
        self._backward = backward
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        return self.grad

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"DiffNode{tag}(shape={self.value.shape})"


def constant(values, name: str = "") -> DiffNode:
    """Leaf node that participates in the graph but is not a parameter."""
    return DiffNode(as_matrix(values), name=name)


def _node(value: np.ndarray, parents, backward) -> DiffNode:
    return DiffNode(value, parents, backward)


# ---------------------------------------------------------------------------
# structural and arithmetic operations
# ---------------------------------------------------------------------------

def add(a: DiffNode, b: DiffNode) -> DiffNode:
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out_val = a.value + b.value

    def bwd(g):
        a.ensure_grad()
        a.grad += g
        b.ensure_grad()
        b.grad += g

    return _node(out_val, (a, b), bwd)


def sub(a: DiffNode, b: DiffNode) -> DiffNode:
    if a.shape != b.shape:
        raise ValueError(f"sub shape mismatch: {a.shape} vs {b.shape}")
    out_val = a.value - b.value

    def bwd(g):
        a.ensure_grad()
        a.grad += g
        b.ensure_grad()
        b.grad -= g

    return _node(out_val, (a, b), bwd)


def hadamard(a: DiffNode, b: DiffNode) -> DiffNode:
    if a.shape != b.shape:
        raise ValueError(f"hadamard shape mismatch: {a.shape} vs {b.shape}")
    out_val = a.value * b.value

    def bwd(g):
        a.ensure_grad()
        a.grad += g * b.value
        b.ensure_grad()
        b.grad += g * a.value

    return _node(out_val, (a, b), bwd)


def scale(a: DiffNode, s: float) -> DiffNode:
    s = float(s)
    out_val = a.value * s

    def bwd(g):
        a.ensure_grad()
        a.grad += g * s

    return _node(out_val, (a,), bwd)


def matmul(a: DiffNode, b: DiffNode) -> DiffNode:
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out_val = a.value @ b.value

    def bwd(g):
        a.ensure_grad()
        a.grad += g @ b.value.T
        b.ensure_grad()
        b.grad += a.value.T @ g

    return _node(out_val, (a, b), bwd)


def transpose(a: DiffNode) -> DiffNode:
    out_val = np.ascontiguousarray(a.value.T)

    def bwd(g):
        a.ensure_grad()
        a.grad += g.T

    return _node(out_val, (a,), bwd)


def add_bias(a: DiffNode, bias: DiffNode) -> DiffNode:
    """Add a 1-row bias to every row of `a`."""
    if bias.shape != (1, a.shape[1]):
        raise ValueError(f"bias shape {bias.shape} incompatible with {a.shape}")
    out_val = a.value + bias.value

    def bwd(g):
        a.ensure_grad()
        a.grad += g
        bias.ensure_grad()
        bias.grad += g.sum(axis=0, keepdims=True)

    return _node(out_val, (a, bias), bwd)


# ---------------------------------------------------------------------------
# elementwise nonlinearities
# ---------------------------------------------------------------------------

def relu(a: DiffNode) -> DiffNode:
    out_val = np.maximum(a.value, 0.0)
    mask = a.value > 0.0

    def bwd(g):
        a.ensure_grad()
        a.grad += g * mask

    return _node(out_val, (a,), bwd)


def sigmoid(a: DiffNode) -> DiffNode:
    x = a.value
    # branch on sign to avoid overflow in exp
    out_val = np.where(x >= 0.0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                       np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bwd(g):
        a.ensure_grad()
        a.grad += g * out_val * (1.0 - out_val)

    return _node(out_val, (a,), bwd)


def tanh(a: DiffNode) -> DiffNode:
    out_val = np.tanh(a.value)

    def bwd(g):
        a.ensure_grad()
        a.grad += g * (1.0 - out_val * out_val)

    return _node(out_val, (a,), bwd)


def exp(a: DiffNode) -> DiffNode:
    out_val = np.exp(a.value)

    def bwd(g):
        a.ensure_grad()
        a.grad += g * out_val

    return _node(out_val, (a,), bwd)


def log(a: DiffNode) -> DiffNode:
    if np.any(a.value <= 0.0):
        raise ValueError("log requires strictly positive entries")
    out_val = np.log(a.value)

    def bwd(g):
        a.ensure_grad()
        a.grad += g / a.value

    return _node(out_val, (a,), bwd)


def clip(a: DiffNode, lo: float, hi: float) -> DiffNode:
    """Clamp entries to [lo, hi]; gradient is zero on the clamped set."""
    out_val = np.clip(a.value, lo, hi)
    mask = (a.value > lo) & (a.value < hi)

    def bwd(g):
        a.ensure_grad()
        a.grad += g * mask

    return _node(out_val, (a,), bwd)


# ---------------------------------------------------------------------------
# reductions and selections
# ---------------------------------------------------------------------------

def sum_all(a: DiffNode) -> DiffNode:
    out_val = np.array([[a.value.sum()]])

    def bwd(g):
        a.ensure_grad()
        a.grad += g[0, 0]

    return _node(out_val, (a,), bwd)


def row_mean(a: DiffNode) -> DiffNode:
    """Mean over the row dimension: (n, c) -> (1, c)."""
    n = a.shape[0]
    if n == 0:
        raise ValueError("row_mean of an empty matrix")
    out_val = a.value.mean(axis=0, keepdims=True)

    def bwd(g):
        a.ensure_grad()
        a.grad += np.repeat(g, n, axis=0) / n

    return _node(out_val, (a,), bwd)


def softmax_col(a: DiffNode) -> DiffNode:
    """Stable softmax over the entries of an (n, 1) column."""
    if a.shape[1] != 1:
        raise ValueError(f"softmax_col expects an (n, 1) column, got {a.shape}")
    z = a.value - a.value.max()
    e = np.exp(z)
    out_val = e / e.sum()

    def bwd(g):
        a.ensure_grad()
        a.grad += out_val * (g - float((g * out_val).sum()))

    return _node(out_val, (a,), bwd)


def gather_rows(a: DiffNode, indices) -> DiffNode:
    """Select rows by index; backward scatter-adds into the source rows."""
    idx = np.asarray(indices, dtype=np.intp).copy()
    out_val = a.value[idx].copy()

    def bwd(g):
        a.ensure_grad()
        np.add.at(a.grad, idx, g)

    return _node(out_val, (a,), bwd)


def stack_scalars(nodes: Sequence[DiffNode]) -> DiffNode:
    """Stack (1, 1) scalars into an (n, 1) column."""
    nodes = tuple(nodes)
    if not nodes:
        raise ValueError("stack_scalars of an empty sequence")
    for nd in nodes:
        if nd.shape != (1, 1):
            raise ValueError(f"stack_scalars expects (1, 1) nodes, got {nd.shape}")
    out_val = np.array([[float(nd.value[0, 0])] for nd in nodes])

    def bwd(g):
        for i, nd in enumerate(nodes):
            nd.ensure_grad()
            nd.grad += g[i : i + 1, 0:1]

    return _node(out_val, nodes, bwd)


# ---------------------------------------------------------------------------
# backpropagation
# ---------------------------------------------------------------------------

def backward(loss: DiffNode, store: "ParamStore | None" = None) -> None:
    """Backpropagate from a (1, 1) loss; gradients accumulate additively.

    If a store is given, every parameter in it ends the call with an
    allocated gradient, including parameters the loss never touched
    (those stay at their accumulated value, zero if fresh).
    """
    if loss.shape != (1, 1):
        raise ValueError(f"loss must be scalar shaped (1, 1), got {loss.shape}")

    topo: list[DiffNode] = []
    visited: set[int] = set()
    stack: list[tuple[DiffNode, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))

    loss.ensure_grad()
    loss.grad += 1.0
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)

    if store is not None:
        for p in store.parameters():
            p.ensure_grad()


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

class ParamStore:
    """Named collection of learnable leaves with seeded initialization.

    Creation order is the draw order of the underlying generator, so two
    stores built with the same seed and the same sequence of `param` calls
    are bit-identical.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._rng = np.random.Generator(np.random.PCG64(self.seed))
        self._params: dict[str, DiffNode] = {}

    def param(self, name: str, rows: int, cols: int, init: str = "glorot") -> DiffNode:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        if init == "glorot":
            bound = np.sqrt(6.0 / (rows + cols))
            value = self._rng.uniform(-bound, bound, size=(rows, cols))
        elif init == "zeros":
            value = np.zeros((rows, cols))
        else:
            raise ValueError(f"unknown init {init!r}")
        node = DiffNode(np.ascontiguousarray(value), name=name)
        self._params[name] = node
        return node

    def __getitem__(self, name: str) -> DiffNode:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def parameters(self) -> Iterable[DiffNode]:
        return self._params.values()

    def items(self):
        return self._params.items()

    def zero_grad(self) -> None:
        for p in self._params.values():
            if p.grad is not None:
                p.grad.fill(0.0)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise ValueError(f"state mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, arr in state.items():
            self._params[name].value = as_matrix(arr, *self._params[name].shape)


def finite_difference_check(
    f: Callable[[], DiffNode], store: ParamStore, step: float = 1e-6
) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` rebuilds the loss graph from the store's current values and returns
    the (1, 1) loss node. Relative error for one entry is
    |analytic - numeric| / max(1, |numeric|); the max over every entry of
    every parameter is returned.
    """
    if step <= 0:
        raise ValueError("step must be positive")

    store.zero_grad()
    loss = f()
    backward(loss, store)
    analytic = {name: p.grad.copy() for name, p in store.items()}

    worst = 0.0
    for name, p in store.items():
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = float(f().value[0, 0])
            flat[i] = orig - step
            lo = float(f().value[0, 0])
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise FloatingPointError(f"non-finite evaluation while probing {name}")
            numeric = (hi - lo) / (2.0 * step)
            err = abs(analytic[name].reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
