"""Adapters as players of a cooperative game.

The value of a coalition ``R`` is the model's mean loss with exactly the
adapters in ``R`` switched on, so lower is better. Shapley values ``phi`` are
reported in those loss units; :attr:`ContributionReport.contributions` flips
the sign so that a helpful adapter has a positive contribution.

Coalitions are bit masks: bit ``i - 1`` set means adapter ``i`` is active.
"""

from __future__ import annotations

import hashlib
import math
import threading
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .adapters import gates_from_subset
from .errors import ContractError
from .trainer import evaluate

EXACT_LIMIT = 14


def model_digest(model):
    h = hashlib.sha256()
    for layer in model.layers:
        h.update(layer.w.tobytes())
    h.update(model.head.tobytes())
    for ad in model.adapters:
        for p in ad.parameters():
            h.update(np.ascontiguousarray(p).tobytes())
    return h.hexdigest()


def mask_to_gates(mask, n):
    return np.array([(mask >> k) & 1 for k in range(n)], dtype=np.int8)


def subset_to_mask(subset):
    mask = 0
    for i in subset:
        mask |= 1 << (i - 1)
    return mask


class CoalitionValueCache:
    """Thread-safe memo of coalition values for one (model, dataset) pair."""

    def __init__(self, model_digest="", dataset_digest=""):
        self.model_digest = model_digest
        self.dataset_digest = dataset_digest
        self._values = {}
        self._lock = threading.Lock()

    def get(self, mask):
        with self._lock:
            return self._values.get(mask)

    def put(self, mask, value):
        with self._lock:
            return self._values.setdefault(mask, value)

    def __len__(self):
        return len(self._values)


class Game:
    """A cached set function over ``n_players`` players."""

    def __init__(self, n_players, value_fn, cache=None):
        self.n_players = n_players
        self._value_fn = value_fn
        self.cache = cache or CoalitionValueCache()

    def compute(self, mask):
        return float(self._value_fn(mask))

    def value(self, mask):
        hit = self.cache.get(mask)
        if hit is not None:
            return hit
        return self.cache.put(mask, self.compute(mask))

    def value_of(self, subset):
        return self.value(subset_to_mask(subset))

    @property
    def grand(self):
        return (1 << self.n_players) - 1

    def prefetch(self, masks, workers=1):
        masks = [m for m in masks if self.cache.get(m) is None]
        if workers <= 1:
            for m in masks:
                self.value(m)
            return
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(self.value, masks))


class ModelGame(Game):
    """Players are the adapters of ``model``; value is mean loss on ``dataset``."""

    def __init__(self, model, dataset, loss_kind=None):
        self.model = model
        self.dataset = dataset
        self.loss_kind = loss_kind
        cache = CoalitionValueCache(model_digest(model), dataset.digest())
        super().__init__(model.depth, self.compute, cache)

    def compute(self, mask):
        gates = mask_to_gates(mask, self.model.depth)
        return evaluate(self.model, self.dataset, gates, self.loss_kind)[0]


def function_game(n_players, fn):
    """Game from ``fn(frozenset of 1-based players) -> value``."""

    def value(mask):
        return fn(frozenset(k + 1 for k in range(n_players) if (mask >> k) & 1))

    return Game(n_players, value)


def coalition_value(model, dataset, subset, loss_kind=None):
    """Mean loss with exactly the adapters in ``subset`` (1-based) active."""
    gates = gates_from_subset(subset, model.depth)
    return evaluate(model, dataset, gates, loss_kind)[0]


def marginal_contribution(game, i, p, samples, rng):
    """Paired Monte Carlo estimate of ``c_i(p)`` and its standard error.

    Each draw includes every other player independently with probability
    ``p`` and evaluates the coalition with and without player ``i``.
    """
    n = game.n_players
    if not 1 <= i <= n:
        raise ContractError(f"player {i} outside 1..{n}")
    if samples < 1:
        raise ContractError("need at least one sample")
    if not 0.0 <= p <= 1.0:
        raise ContractError("p must lie in [0, 1]")
    bit = 1 << (i - 1)
    weights = 1 << np.arange(n)
    diffs = np.empty(samples)
    for s in range(samples):
        draw = rng.random(n) < p
        mask = int(np.dot(draw, weights)) & ~bit
        diffs[s] = game.value(mask | bit) - game.value(mask)
    se = float(np.std(diffs, ddof=1) / math.sqrt(samples)) if samples > 1 else 0.0
    return float(diffs.mean()), se


@dataclass
class ContributionReport:
    phi: np.ndarray
    stderr: np.ndarray
    method: str
    value_full: float
    value_empty: float
    p_grid: np.ndarray = field(default_factory=lambda: np.zeros(0))
    marginals: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    samples: int = 0

    @property
    def contributions(self):
        """``-phi``: loss reduction attributed to each adapter."""
        return -self.phi

    @property
    def efficiency_residual(self):
        return float(abs(self.phi.sum() - (self.value_full - self.value_empty)))

    def rows(self):
        """``(adapter, phi, stderr, c_p0, ...)`` with 1-based adapter ids."""
        out = []
        for k in range(self.phi.size):
            cs = list(self.marginals[k]) if self.marginals.size else []
            out.append((k + 1, float(self.phi[k]), float(self.stderr[k]), *map(float, cs)))
        return out

    def header(self):
        return ["adapter", "phi", "stderr"] + [f"c_p{k}" for k in range(self.p_grid.size)]


def shapley_exact(game):
    """Shapley values by full enumeration of the ``2^L`` coalitions."""
    n = game.n_players
    if n > EXACT_LIMIT:
        raise ContractError(
            f"exact Shapley limited to {EXACT_LIMIT} players; use shapley_multilinear"
        )
    values = np.array([game.value(m) for m in range(1 << n)])
    sizes = np.array([bin(m).count("1") for m in range(1 << n)])
    weight = np.array([math.factorial(s) * math.factorial(n - s - 1) / math.factorial(n)
                       for s in range(n)])
    phi = np.zeros(n)
    for i in range(n):
        bit = 1 << i
        without = np.array([m for m in range(1 << n) if not m & bit])
        phi[i] = np.sum(weight[sizes[without]] * (values[without | bit] - values[without]))
    return ContributionReport(phi, np.zeros(n), "exact", values[-1], values[0])


def shapley_multilinear(game, p_grid=11, samples=256, rng=None):
    """Shapley estimate as the trapezoid integral of ``c_i(p)`` over [0, 1].

    ``c_i(0)`` and ``c_i(1)`` are computed exactly; interior grid points use
    :func:`marginal_contribution` with ``samples`` paired draws.
    """
    if p_grid < 2:
        raise ContractError("p_grid needs at least two points")
    rng = rng if rng is not None else np.random.default_rng(0)
    n = game.n_players
    ps = np.linspace(0.0, 1.0, p_grid)
    c = np.zeros((n, p_grid))
    se = np.zeros((n, p_grid))
    full, empty = game.grand, 0
    for i in range(1, n + 1):
        bit = 1 << (i - 1)
        c[i - 1, 0] = game.value(bit) - game.value(empty)
        c[i - 1, -1] = game.value(full) - game.value(full & ~bit)
        for k in range(1, p_grid - 1):
            c[i - 1, k], se[i - 1, k] = marginal_contribution(game, i, ps[k], samples, rng)
    h = 1.0 / (p_grid - 1)
    w = np.full(p_grid, h)
    w[0] = w[-1] = 0.5 * h
    phi = c @ w
    stderr = np.sqrt((se**2) @ (w**2))
    return ContributionReport(phi, stderr, "multilinear", game.value(full), game.value(empty),
                              ps, c, samples)


@dataclass
class ConcentrationSummary:
    shares: np.ndarray
    buckets: list
    undefined: bool = False

    def rows(self):
        return [(k + 1, float(s)) for k, s in enumerate(self.shares)]


def concentration_summary(report, bucket):
    """Share of positive contribution held by consecutive groups of ``bucket`` layers.

    The last group may be shorter. If no adapter helps, shares are uniform
    and ``undefined`` is set.
    """
    if bucket < 1:
        raise ContractError("bucket size must be positive")
    n = report.phi.size
    groups = [list(range(lo, min(lo + bucket, n))) for lo in range(0, n, bucket)]
    pos = np.clip(report.contributions, 0.0, None)
    total = pos.sum()
    if total <= 0.0:
        warnings.warn("no adapter has a positive contribution; shares undefined")
        return ConcentrationSummary(np.full(len(groups), 1.0 / len(groups)), groups, True)
    shares = np.array([pos[g].sum() for g in groups]) / total
    return ConcentrationSummary(shares, groups)
