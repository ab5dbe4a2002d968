"""Frozen layered model with one gated low-rank adapter per layer.

Layer ``i`` computes ``x_i = act(x_{i-1} W_i^T + delta_i * alpha * (x_{i-1} A_i^T) B_i^T)``
on row-major batches, followed by a frozen linear head. A closed gate means
the adapter factors are never read.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import numerics as nx
from .errors import ConfigurationError, ContractError, DimensionError

NONLINEARITIES = ("tanh", "relu", "identity", "tanh-residual", "relu-residual")


def low_rank_apply(x, a, b, alpha, dropout_mask=None):
    """``alpha * (x A^T) B^T``, optionally masking the rank-``r`` activation."""
    z = nx.matmul(x, nx.transpose(a))
    if dropout_mask is not None:
        z = nx.hadamard(z, dropout_mask)
    return nx.scale(nx.matmul(z, nx.transpose(b)), alpha)


@dataclass(frozen=True)
class AdapterPair:
    """Low-rank update ``alpha * b @ a`` with ``a`` (r x n) and ``b`` (m x r)."""

    a: np.ndarray
    b: np.ndarray
    alpha: float = 1.0

    def __post_init__(self):
        a, b = nx.matrix(self.a), nx.matrix(self.b)
        if a.shape[0] != b.shape[1]:
            raise DimensionError(f"A {a.shape} and B {b.shape} disagree on rank")
        if a.shape[0] > min(a.shape[1], b.shape[0]):
            raise ConfigurationError(f"rank {a.shape[0]} exceeds min{(b.shape[0], a.shape[1])}")
        if not self.alpha >= 0:
            raise ConfigurationError("alpha must be non-negative")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "alpha", float(self.alpha))

    @property
    def rank(self):
        return self.a.shape[0]

    @property
    def shape(self):
        return (self.b.shape[0], self.a.shape[1])

    def delta(self):
        return self.alpha * (self.b @ self.a)

    def apply(self, x, dropout_mask=None):
        """Adapter contribution for a batch ``x`` (rows are samples)."""
        return low_rank_apply(x, self.a, self.b, self.alpha, dropout_mask)

    def parameters(self):
        return (self.a, self.b)


@dataclass(frozen=True)
class EnsembleAdapter:
    """Weighted sum of two factored adapters, ``lam * d1 + (1 - lam) * d2``.

    Kept factored so that ``lam`` in {0, 1} reproduces a source adapter's
    output bit for bit.
    """

    first: AdapterPair
    second: AdapterPair
    lam: float

    @property
    def rank(self):
        return self.first.rank + self.second.rank

    @property
    def shape(self):
        return self.first.shape

    def delta(self):
        return self.lam * self.first.delta() + (1.0 - self.lam) * self.second.delta()

    def apply(self, x, dropout_mask=None):
        y1 = self.first.apply(x)
        y2 = self.second.apply(x)
        return nx.add(nx.scale(y1, self.lam), nx.scale(y2, 1.0 - self.lam))

    def parameters(self):
        return self.first.parameters() + self.second.parameters()


@dataclass(frozen=True)
class BaseLayer:
    w: np.ndarray
    nonlinearity: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "w", nx.matrix(self.w))
        if self.nonlinearity not in NONLINEARITIES:
            raise ConfigurationError(f"unknown nonlinearity {self.nonlinearity!r}")
        if self.nonlinearity.endswith("-residual") and self.w.shape[0] != self.w.shape[1]:
            raise ConfigurationError("residual layers need square weights")

    @property
    def shape(self):
        return self.w.shape


def _activate(kind, z, h):
    if kind.endswith("-residual"):
        return nx.add(h, _activate(kind[: -len("-residual")], z, h))
    if kind == "tanh":
        return nx.tanh(z)
    if kind == "relu":
        return nx.relu(z)
    return z


class InvocationCounter:
    """Counts how often each adapter actually ran."""

    def __init__(self, n_layers):
        self.counts = np.zeros(n_layers, dtype=np.int64)

    def record(self, gates):
        self.counts += np.asarray(gates, dtype=np.int64)

    def total(self):
        return int(self.counts.sum())


@dataclass(frozen=True)
class GatedModel:
    """Immutable model: frozen base layers carrying adapters, topped by a frozen linear head."""

    layers: tuple
    adapters: tuple
    head: np.ndarray
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "adapters", tuple(self.adapters))
        object.__setattr__(self, "head", nx.matrix(self.head))
        if len(self.layers) != len(self.adapters):
            raise ContractError("exactly one adapter per layer is required")
        if not self.layers:
            raise ContractError("model needs at least one layer")
        for i, (layer, adapter) in enumerate(zip(self.layers, self.adapters)):
            if adapter.shape != layer.shape:
                raise DimensionError(
                    f"layer {i + 1}: adapter shape {adapter.shape} != weight {layer.shape}"
                )
            if i and self.layers[i - 1].shape[0] != layer.shape[1]:
                raise DimensionError(f"layer {i + 1} input does not match layer {i} output")
        if self.head.shape[1] != self.layers[-1].shape[0]:
            raise DimensionError("head input does not match last layer output")

    @property
    def depth(self):
        return len(self.layers)

    @property
    def input_dim(self):
        return self.layers[0].shape[1]

    @property
    def output_dim(self):
        return self.head.shape[0]

    def with_adapters(self, adapters):
        return replace(self, adapters=tuple(adapters))

    def adapter_delta(self, i):
        """Dense update of layer ``i`` (1-based)."""
        if not 1 <= i <= self.depth:
            raise ContractError(f"layer index {i} outside 1..{self.depth}")
        return self.adapters[i - 1].delta()

    def forward(self, x, gates=None, counter=None, dropout_masks=None):
        """Prediction for the batch ``x`` under per-layer ``gates``.

        ``x`` may be an array or a graph node; adapter factors that are graph
        nodes (see :func:`cotolab.trainer`) make the result differentiable.
        """
        gates = ones_gates(self.depth) if gates is None else check_gates(gates, self.depth)
        xv = x.value if isinstance(x, nx.Node) else np.asarray(x, dtype=np.float64)
        if xv.ndim != 2 or xv.shape[1] != self.input_dim:
            raise DimensionError(f"input shape {xv.shape} does not match width {self.input_dim}")
        if counter is not None:
            counter.record(gates)
        h = x
        for i, (layer, adapter) in enumerate(zip(self.layers, self.adapters)):
            z = nx.matmul(h, layer.w.T)
            if gates[i]:
                mask = None if dropout_masks is None else dropout_masks[i]
                z = nx.add(z, adapter.apply(h, mask))
            h = _activate(layer.nonlinearity, z, h)
        return nx.matmul(h, self.head.T)

    def base_forward(self, x):
        return self.forward(x, zeros_gates(self.depth))


def ones_gates(n):
    return np.ones(n, dtype=np.int8)


def zeros_gates(n):
    return np.zeros(n, dtype=np.int8)


def check_gates(gates, n):
    g = np.asarray(gates)
    if g.shape != (n,):
        raise DimensionError(f"gate vector of length {g.size} for {n} layers")
    if not np.all((g == 0) | (g == 1)):
        raise ContractError("gates must be 0 or 1")
    return g.astype(np.int8)


def gates_from_subset(subset, n):
    """Gate vector with ``delta_i = 1`` for 1-based ``i`` in ``subset``."""
    g = zeros_gates(n)
    for i in subset:
        g[i - 1] = 1
    return g


def init_adapters(shapes, rank, alpha, rng):
    """A uniform in +-1/sqrt(n), B zero, for each ``(m, n)`` in ``shapes``."""
    if rank < 1:
        raise ConfigurationError("rank must be at least 1")
    out = []
    for m, n in shapes:
        if rank > min(m, n):
            raise ConfigurationError(f"rank {rank} exceeds min({m}, {n})")
        bound = 1.0 / np.sqrt(n)
        a = rng.uniform(-bound, bound, size=(rank, n))
        out.append(AdapterPair(a, np.zeros((m, rank)), alpha))
    return out


def build_model(rng, input_dim, widths, output_dim, rank=2, alpha=1.0,
                nonlinearity="tanh", weight_scale=1.0, adapter_rng=None):
    """Random frozen base network with freshly initialized adapters.

    Base weights are Gaussian with variance ``weight_scale**2 / fan_in``.
    ``adapter_rng`` defaults to ``rng``.
    """
    dims = [input_dim, *widths]
    layers = [
        BaseLayer(rng.normal(0.0, weight_scale / np.sqrt(n), size=(m, n)), nonlinearity)
        for n, m in zip(dims[:-1], dims[1:])
    ]
    head = rng.normal(0.0, 1.0 / np.sqrt(dims[-1]), size=(output_dim, dims[-1]))
    adapters = init_adapters([l.shape for l in layers], rank, alpha, adapter_rng or rng)
    return GatedModel(layers, adapters, head)


def dropout_mask(shape, rate, rng):
    """Inverted-dropout mask: zeros with probability ``rate``, survivors 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError("dropout rate must lie in [0, 1)")
    if rate == 0.0:
        return np.ones(shape)
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)
