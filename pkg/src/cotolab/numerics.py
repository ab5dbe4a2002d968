"""Dense float64 kernels and a small reverse-mode differentiation engine.

Matrices are plain two-dimensional ``numpy.ndarray`` objects of dtype float64.
:func:`matrix` validates and freezes them. Every kernel below accepts either a
raw array or a :class:`Node`; when any operand is a node the result is a node
recorded in the computation graph, so the same call sites serve evaluation
and training.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError, NumericError

LOSS_KINDS = ("mse", "softmax-cross-entropy")


def matrix(data, *, copy=True):
    """Return ``data`` as a read-only, finite, 2-D float64 array."""
    arr = np.array(data, dtype=np.float64, copy=copy)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise DimensionError(f"matrix must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericError("matrix contains NaN or Inf")
    arr.setflags(write=False)
    return arr


class Node:
    """A value in the computation graph.

    ``parents`` are the input nodes and ``rule`` names the local gradient
    rule; ``_pullback`` maps the upstream gradient to one gradient per parent.
    Leaves created with ``requires_grad=True`` are the parameters that
    :func:`backward` reports on.
    """

    __slots__ = ("value", "_grad", "parents", "rule", "_pullback", "requires_grad")

    def __init__(self, value, parents=(), rule="leaf", pullback=None, requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        self._grad = None
        self.parents = tuple(parents)
        self.rule = rule
        self._pullback = pullback
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)

    @property
    def grad(self):
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self._grad = None

    def __repr__(self):
        return f"Node(rule={self.rule!r}, shape={self.value.shape})"


def _val(x):
    return x.value if isinstance(x, Node) else x


def _wrap(value, parents, rule, pullback):
    nodes = [p for p in parents if isinstance(p, Node)]
    if not nodes:
        return value
    parents = [p if isinstance(p, Node) else Node(p) for p in parents]
    return Node(value, parents, rule, pullback)


def matmul(a, b):
    av, bv = _val(a), _val(b)
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise DimensionError(f"cannot multiply {av.shape} by {bv.shape}")
    out = av @ bv
    return _wrap(out, (a, b), "matmul", lambda g: (g @ bv.T, av.T @ g))


def transpose(a):
    return _wrap(_val(a).T, (a,), "transpose", lambda g: (g.T,))


def scale(a, c):
    """Multiply by a constant scalar ``c``."""
    c = float(c)
    return _wrap(c * _val(a), (a,), "scale", lambda g: (c * g,))


def total(a):
    """Sum of all entries, as a scalar."""
    av = _val(a)
    return _wrap(np.sum(av), (a,), "sum", lambda g: (np.full_like(av, g),))


def elementwise(op, a, b=None):
    """Pointwise op by name; binary ops take ``b``."""
    av = _val(a)
    if op in ("add", "hadamard"):
        if b is None:
            raise ContractError(f"{op} needs two operands")
        bv = _val(b)
        if av.shape != bv.shape:
            raise DimensionError(f"{op}: shapes {av.shape} and {bv.shape} differ")
        if op == "add":
            return _wrap(av + bv, (a, b), "add", lambda g: (g, g))
        return _wrap(av * bv, (a, b), "hadamard", lambda g: (g * bv, g * av))
    if b is not None:
        raise ContractError(f"{op} is unary")
    if op == "relu":
        mask = av > 0
        return _wrap(np.where(mask, av, 0.0), (a,), "relu", lambda g: (g * mask,))
    if op == "tanh":
        out = np.tanh(av)
        return _wrap(out, (a,), "tanh", lambda g: (g * (1.0 - out * out),))
    raise ContractError(f"unknown elementwise op {op!r}")


def add(a, b):
    return elementwise("add", a, b)


def hadamard(a, b):
    return elementwise("hadamard", a, b)


def relu(a):
    return elementwise("relu", a)


def tanh(a):
    return elementwise("tanh", a)


def _check_finite(*arrays):
    for arr in arrays:
        if not np.all(np.isfinite(arr)):
            raise NumericError("non-finite value passed to loss")


def _one_hot(target, n_rows, n_classes):
    target = np.asarray(target)
    if target.ndim == 2:
        if target.shape != (n_rows, n_classes):
            raise DimensionError(
                f"one-hot target {target.shape} does not match logits {(n_rows, n_classes)}"
            )
        return target.astype(np.float64)
    labels = target.astype(np.int64).ravel()
    if labels.shape[0] != n_rows:
        raise DimensionError(f"{labels.shape[0]} labels for {n_rows} predictions")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ContractError(f"label outside [0, {n_classes})")
    hot = np.zeros((n_rows, n_classes))
    hot[np.arange(n_rows), labels] = 1.0
    return hot


def log_softmax(z):
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def per_sample_loss(kind, pred, target):
    """Loss of every row of ``pred`` as a 1-D array (no graph)."""
    pred = np.asarray(pred, dtype=np.float64)
    _check_finite(pred)
    if kind == "mse":
        target = np.asarray(target, dtype=np.float64).reshape(pred.shape)
        _check_finite(target)
        return np.mean((pred - target) ** 2, axis=1)
    if kind == "softmax-cross-entropy":
        hot = _one_hot(target, *pred.shape)
        return -np.sum(hot * log_softmax(pred), axis=1)
    raise ContractError(f"unknown loss kind {kind!r}")


def loss(kind, pred, target):
    """Mean loss over rows. ``target`` is never differentiated."""
    pv = _val(pred)
    if pv.ndim != 2:
        raise DimensionError(f"predictions must be 2-D, got {pv.shape}")
    _check_finite(pv)
    if kind == "mse":
        tv = np.asarray(target, dtype=np.float64)
        if tv.shape != pv.shape:
            raise DimensionError(f"mse: target {tv.shape} vs prediction {pv.shape}")
        _check_finite(tv)
        diff = pv - tv
        with np.errstate(over="ignore"):  # overflow surfaces as inf; callers check
            value = np.mean(diff * diff)
        return _wrap(value, (pred,), "mse", lambda g: (g * 2.0 * diff / diff.size,))
    if kind == "softmax-cross-entropy":
        n = pv.shape[0]
        hot = _one_hot(target, *pv.shape)
        logp = log_softmax(pv)
        value = -np.sum(hot * logp) / n
        probs = np.exp(logp)

        def pullback(g):
            return (g * (probs * hot.sum(axis=1, keepdims=True) - hot) / n,)

        return _wrap(value, (pred,), "softmax-cross-entropy", pullback)
    raise ContractError(f"unknown loss kind {kind!r}")


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root):
    """Accumulate d(root)/d(leaf) into every reachable leaf that requires grad.

    Returns a dict mapping each such leaf to its gradient array.
    """
    if not isinstance(root, Node):
        raise ContractError("backward needs a graph node")
    if root.value.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.value.shape}")
    order = _topological_order(root)
    for node in order:
        node._grad = None
    root._grad = np.ones_like(root.value)
    leaves = {}
    for node in reversed(order):
        if node._pullback is None:
            if node.requires_grad:
                leaves[node] = node.grad
            continue
        grads = node._pullback(node.grad)
        for parent, g in zip(node.parents, grads):
            if not parent.requires_grad:
                continue
            g = np.reshape(g, parent.value.shape)
            parent._grad = g.copy() if parent._grad is None else parent._grad + g
    return leaves


def grad_check(f, params, step=1e-5):
    """Largest relative disagreement between autodiff and central differences.

    ``f`` maps one node (or array) per parameter to a scalar. The error of an
    entry is ``|auto - fd| / max(|fd|, 1e-8)``.
    """
    if step <= 0:
        raise ContractError("finite-difference step must be positive")
    params = [np.array(p, dtype=np.float64) for p in params]
    leaves = [Node(p, requires_grad=True) for p in params]
    root = f(*leaves)
    backward(root)
    worst = 0.0
    for k, p in enumerate(params):
        auto = leaves[k].grad
        for idx in np.ndindex(p.shape):
            bumped = [q.copy() for q in params]
            bumped[k][idx] = p[idx] + step
            up = float(_val(f(*bumped)))
            bumped[k][idx] = p[idx] - step
            down = float(_val(f(*bumped)))
            fd = (up - down) / (2.0 * step)
            err = abs(auto[idx] - fd) / max(abs(fd), 1e-8)
            worst = max(worst, err)
    return worst
