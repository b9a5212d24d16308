"""Minimal reverse-mode automatic differentiation on a flat tape.

Values are float64 numpy arrays. Each primitive records its output node
together with ``(parent, vjp)`` pairs; ``Tape.backward`` sweeps node ids in
descending order, so gradient accumulation happens in a fixed order and
repeated backward calls over the same tape are bitwise identical. Gradient
accumulation rebinds (``g = g + contrib``) instead of mutating, so vjp
closures may safely return views of their upstream argument.

Modules with bespoke derivatives (optimization layers, convolution gathers)
extend the engine by calling ``Tape.record`` with their own vjp closures;
nothing here needs to know about them.
"""

from __future__ import annotations

import weakref
from typing import Callable, Sequence

import numpy as np

from . import linalg
from .errors import ShapeMismatchError

Vjp = Callable[[np.ndarray], np.ndarray]


class Node:
    """One tape entry: an id, a value, an op tag, and parent/vjp pairs.

    A node holds only a weak reference to its tape. Together with the fact
    that vjp closures never capture the tape, this keeps the recorded graph
    cycle-free: releasing the last direct reference to a ``Tape`` frees every
    node and intermediate array immediately by reference counting, which is
    what keeps long training loops at a flat memory footprint.
    """

    __slots__ = ("_tape_ref", "id", "value", "op", "parents")

    def __init__(self, tape: "Tape", node_id: int, value: np.ndarray, op: str, parents):
        self._tape_ref = weakref.ref(tape)
        self.id = node_id
        self.value = value
        self.op = op
        self.parents = parents

    @property
    def tape(self) -> "Tape":
        tape = self._tape_ref()
        if tape is None:
            raise ReferenceError(
                "the tape this node was recorded on has been garbage-collected; "
                "keep the Tape alive for as long as you build on its nodes"
            )
        return tape

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Node(id={self.id}, op={self.op!r}, shape={self.value.shape})"

    # Operator sugar over the module-level primitives.
    def __add__(self, other):
        return add_scalar(self, other) if _is_number(other) else add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add_scalar(self, -other) if _is_number(other) else sub(self, other)

    def __rsub__(self, other):
        return add_scalar(scale(self, -1.0), other)

    def __mul__(self, other):
        return scale(self, other) if _is_number(other) else mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _is_number(x) -> bool:
    return isinstance(x, (int, float, np.integer, np.floating))


class Tape:
    """Append-only record of a computation; owns node ids."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, value, op: str = "leaf") -> Node:
        """Enter an input/parameter array; receives but does not propagate grads."""
        arr = np.asarray(value, dtype=np.float64)
        return self._append(arr, op, ())

    def record(self, op: str, value, parents: Sequence[tuple[Node, Vjp]]) -> Node:
        """Append an op result with its local vector-Jacobian products."""
        parents = tuple(parents)
        for parent, vjp in parents:
            if parent.tape is not self:
                raise ValueError(f"parent node {parent!r} belongs to a different tape")
            if not callable(vjp):
                raise TypeError("each parent must come with a callable vjp")
        arr = np.asarray(value, dtype=np.float64)
        return self._append(arr, op, parents)

    def _append(self, value: np.ndarray, op: str, parents) -> Node:
        node = Node(self, len(self.nodes), value, op, parents)
        self.nodes.append(node)
        return node

    def backward(self, root: Node) -> "Gradients":
        """Accumulate d(root)/d(node) for every node the root depends on.

        The root must be scalar (size one). The sweep visits ids in strictly
        descending order; nodes the root does not touch are skipped.
        """
        if root.tape is not self:
            raise ValueError("root node belongs to a different tape")
        if root.value.size != 1:
            raise ShapeMismatchError(
                f"backward root must be scalar, got shape {root.value.shape}"
            )
        grads: dict[int, np.ndarray] = {root.id: np.ones_like(root.value)}
        for node in reversed(self.nodes[: root.id + 1]):
            upstream = grads.get(node.id)
            if upstream is None:
                continue
            for parent, vjp in node.parents:
                contrib = vjp(upstream)
                held = grads.get(parent.id)
                grads[parent.id] = contrib if held is None else held + contrib
        return Gradients(grads)


class Gradients:
    """Gradient lookup by node; absent nodes read as zero."""

    def __init__(self, grads: dict[int, np.ndarray]):
        self._grads = grads

    def __getitem__(self, node: Node) -> np.ndarray:
        g = self._grads.get(node.id)
        if g is None:
            return np.zeros_like(node.value)
        return np.asarray(g)

    def __contains__(self, node: Node) -> bool:
        return node.id in self._grads


# ---------------------------------------------------------------------------
# Primitives


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (the reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a: Node, b: Node) -> Node:
    value = a.value + b.value
    return a.tape.record(
        "add",
        value,
        [
            (a, lambda u: _unbroadcast(u, a.value.shape)),
            (b, lambda u: _unbroadcast(u, b.value.shape)),
        ],
    )


def sub(a: Node, b: Node) -> Node:
    value = a.value - b.value
    return a.tape.record(
        "sub",
        value,
        [
            (a, lambda u: _unbroadcast(u, a.value.shape)),
            (b, lambda u: _unbroadcast(-u, b.value.shape)),
        ],
    )


def add_scalar(a: Node, c) -> Node:
    c = float(c)
    return a.tape.record("add_scalar", a.value + c, [(a, lambda u: u)])


def mul(a: Node, b: Node) -> Node:
    value = a.value * b.value
    return a.tape.record(
        "mul",
        value,
        [
            (a, lambda u: _unbroadcast(u * b.value, a.value.shape)),
            (b, lambda u: _unbroadcast(u * a.value, b.value.shape)),
        ],
    )


def scale(a: Node, c) -> Node:
    c = float(c)
    return a.tape.record("scale", c * a.value, [(a, lambda u: c * u)])


def matmul(a: Node, b: Node) -> Node:
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ShapeMismatchError("matmul operands must be 2-D")
    if a.value.shape[1] != b.value.shape[0]:
        raise ShapeMismatchError(
            f"inner dimensions differ: {a.value.shape} @ {b.value.shape}"
        )
    value = a.value @ b.value
    return a.tape.record(
        "matmul",
        value,
        [
            (a, lambda u: u @ b.value.T),
            (b, lambda u: a.value.T @ u),
        ],
    )


def transpose(a: Node, axes=None) -> Node:
    if axes is None:
        axes = tuple(reversed(range(a.value.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    value = np.transpose(a.value, axes)
    return a.tape.record("transpose", value, [(a, lambda u: np.transpose(u, inverse))])


def reshape(a: Node, shape) -> Node:
    old = a.value.shape
    value = a.value.reshape(shape)
    return a.tape.record("reshape", value, [(a, lambda u: u.reshape(old))])


def sum_all(a: Node) -> Node:
    shape = a.value.shape
    value = np.asarray(a.value.sum())
    return a.tape.record("sum_all", value, [(a, lambda u: np.full(shape, float(u)))])


def sum_axis(a: Node, axis: int, keepdims: bool = False) -> Node:
    shape = a.value.shape
    value = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(u):
        if not keepdims:
            u = np.expand_dims(u, axis)
        return np.ascontiguousarray(np.broadcast_to(u, shape))

    return a.tape.record("sum_axis", value, [(a, vjp)])


def mean_all(a: Node) -> Node:
    n = a.value.size
    return scale(sum_all(a), 1.0 / n)


def clamp_min(a: Node, floor: float) -> Node:
    """Elementwise max(a, floor); the subgradient at the kink is zero."""
    floor = float(floor)
    mask = a.value > floor
    value = np.maximum(a.value, floor)
    return a.tape.record("clamp_min", value, [(a, lambda u: u * mask)])


def relu(a: Node) -> Node:
    node = clamp_min(a, 0.0)
    node.op = "relu"
    return node


def mse(a: Node, b: Node) -> Node:
    """Mean squared difference over all entries (scalar node)."""
    if a.value.shape != b.value.shape:
        raise ShapeMismatchError(
            f"mse operands must share a shape, got {a.value.shape} and {b.value.shape}"
        )
    diff = a.value - b.value
    n = diff.size
    value = np.asarray(np.mean(diff * diff))
    coeff = 2.0 / n
    return a.tape.record(
        "mse",
        value,
        [
            (a, lambda u: (coeff * float(u)) * diff),
            (b, lambda u: (-coeff * float(u)) * diff),
        ],
    )


def softmax_cols(a: Node) -> Node:
    """Column-wise softmax (axis 0) with the usual max-shift stabilization."""
    shifted = a.value - a.value.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    value = e / e.sum(axis=0, keepdims=True)

    def vjp(u):
        inner = (value * u).sum(axis=0, keepdims=True)
        return value * (u - inner)

    return a.tape.record("softmax_cols", value, [(a, vjp)])


def detach(a: Node) -> Node:
    """Re-enter a value as a leaf: gradients stop here."""
    return a.tape.leaf(a.value, op="detach")


def ste(grad_path: Node, value_path: Node) -> Node:
    """Straight-through composite: forward ``value_path``, backward to ``grad_path``.

    The upstream gradient is passed through unchanged to ``grad_path``;
    ``value_path`` receives nothing. The two values must share a shape.
    """
    if grad_path.value.shape != value_path.value.shape:
        raise ShapeMismatchError(
            "straight-through operands must share a shape, got "
            f"{grad_path.value.shape} and {value_path.value.shape}"
        )
    return grad_path.tape.record("ste", value_path.value, [(grad_path, lambda u: u)])


def gather_columns(a: Node, idx: np.ndarray) -> Node:
    """Select columns ``a[:, idx]``; the adjoint scatter-adds duplicates."""
    idx = np.asarray(idx)
    if idx.ndim != 1 or not np.issubdtype(idx.dtype, np.integer):
        raise ShapeMismatchError("column index must be a 1-D integer array")
    n_cols = a.value.shape[1]
    if idx.size and (idx.min() < 0 or idx.max() >= n_cols):
        raise IndexError("column index out of range")
    value = a.value[:, idx]

    def vjp(u):
        out = np.empty((u.shape[0], n_cols))
        for r in range(u.shape[0]):
            out[r] = np.bincount(idx, weights=u[r], minlength=n_cols)
        return out

    return a.tape.record("gather_columns", value, [(a, vjp)])


def solve_spd(a: Node, b: Node) -> Node:
    """Differentiable SPD solve; reuses one Cholesky factor for value and vjps."""
    lower = linalg.cholesky_spd(a.value)
    x = linalg.solve_with_factor(lower, b.value)

    def vjp_b(u):
        return linalg.solve_with_factor(lower, u)

    def vjp_a(u):
        grad_b = linalg.solve_with_factor(lower, u)
        g = -grad_b @ x.T
        return 0.5 * (g + g.T)

    return a.tape.record("solve_spd", x, [(a, vjp_a), (b, vjp_b)])


def solve_spd_vjp(a, b, x, upstream) -> tuple[np.ndarray, np.ndarray]:
    """Adjoint of ``x = solve_spd(a, b)`` as plain arrays.

    Returns ``(grad_a, grad_b)`` with ``grad_b = a^{-1} upstream`` and
    ``grad_a = -sym(grad_b x^T)``; the symmetrization keeps the gradient in
    the symmetric tangent space the forward map actually sees.
    """
    a = np.asarray(a, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != x.shape:
        raise ShapeMismatchError(
            f"upstream shape {upstream.shape} does not match solution {x.shape}"
        )
    b = np.asarray(b, dtype=np.float64)
    if b.shape != x.shape:
        raise ShapeMismatchError(
            f"right-hand side shape {b.shape} does not match solution {x.shape}"
        )
    grad_b = linalg.solve_spd(a, upstream)
    g = -grad_b @ x.T
    return 0.5 * (g + g.T), grad_b


# ---------------------------------------------------------------------------
# Finite-difference checking


def grad_check(fn, params, eps: float = 1e-5) -> float:
    """Worst relative error between reverse-mode and central differences.

    ``fn(tape, leaves)`` must map a tape plus one leaf node per entry of
    ``params`` to a scalar node, deterministically. Every parameter entry is
    perturbed by ``+-eps``; the relative error uses the symmetric form
    ``|ad - fd| / (1e-8 + |ad| + |fd|)``.
    """
    params = [np.array(p, dtype=np.float64) for p in params]

    def evaluate() -> float:
        tape = Tape()
        leaves = [tape.leaf(p) for p in params]
        return float(fn(tape, leaves).value)

    tape = Tape()
    leaves = [tape.leaf(p) for p in params]
    root = fn(tape, leaves)
    if root.value.size != 1:
        raise ShapeMismatchError("grad_check target must be scalar")
    grads = tape.backward(root)
    ad = [grads[leaf].ravel() for leaf in leaves]

    worst = 0.0
    for p, g_ad in zip(params, ad):
        flat = p.ravel()
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + eps
            f_plus = evaluate()
            flat[i] = saved - eps
            f_minus = evaluate()
            flat[i] = saved
            g_fd = (f_plus - f_minus) / (2.0 * eps)
            rel = abs(g_ad[i] - g_fd) / (1e-8 + abs(g_ad[i]) + abs(g_fd))
            worst = max(worst, rel)
    return worst
