"""Exhaustive check of the Jensen bound on the expected gated loss.

For a convex per-input loss and gates drawn i.i.d. Bernoulli(p), the expected
loss over all ``2^L`` gate vectors is at least the binomially weighted loss
of the size-``j`` averaged predictions. Everything here is computed by
enumeration, so the comparison is exact up to rounding.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ContractError
from .schedule import binomial_weights

EXACT_LIMIT = 14
BOUND_TOL = 1e-9


def masks_of_size(n, j):
    """All gate vectors with exactly ``j`` ones, in lexicographic order of positions."""
    out = []
    for on in itertools.combinations(range(n), j):
        g = np.zeros(n, dtype=np.int8)
        g[list(on)] = 1
        out.append(g)
    return out


def subnetwork_expected_prediction(model, x, j, samples=None, rng=None):
    """Average prediction over gate vectors with exactly ``j`` open gates.

    Enumerates all ``C(L, j)`` vectors when ``L <= 14``; otherwise averages
    ``samples`` uniformly drawn size-``j`` vectors (default 1024).
    """
    n = model.depth
    if not 0 <= j <= n:
        raise ContractError(f"j={j} outside 0..{n}")
    if n <= EXACT_LIMIT and samples is None:
        masks = masks_of_size(n, j)
    else:
        rng = rng if rng is not None else np.random.default_rng(0)
        masks = []
        for _ in range(samples or 1024):
            g = np.zeros(n, dtype=np.int8)
            g[rng.choice(n, size=j, replace=False)] = 1
            masks.append(g)
    total = None
    for g in masks:
        out = model.forward(x, g)
        total = out if total is None else total + out
    return total / len(masks)


@dataclass
class BoundReport:
    p_grid: np.ndarray
    lhs: np.ndarray           # E_delta[loss]
    rhs_full: np.ndarray      # sum over j = 0..L
    rhs_j_ge_1: np.ndarray    # sum over j = 1..L
    n_masks: int

    @property
    def gap(self):
        return self.lhs - self.rhs_full

    @property
    def holds(self):
        return bool(np.all(self.gap >= -BOUND_TOL))

    def rows(self):
        return [(float(p), float(a), float(b), float(c), float(a - b))
                for p, a, b, c in zip(self.p_grid, self.lhs, self.rhs_full, self.rhs_j_ge_1)]


def _mask_tables(model, x, y, loss_kind):
    """Per-mask mean loss and per-size mean loss / averaged predictions."""
    n = model.depth
    size_loss = np.zeros(n + 1)
    size_pred_loss = np.zeros(n + 1)
    for j in range(n + 1):
        masks = masks_of_size(n, j)
        preds = [model.forward(x, g) for g in masks]
        losses = [nx.per_sample_loss(loss_kind, pr, y) for pr in preds]
        size_loss[j] = np.mean(np.mean(losses, axis=0))
        avg = sum(preds) / len(preds)
        size_pred_loss[j] = np.mean(nx.per_sample_loss(loss_kind, avg, y))
    return size_loss, size_pred_loss


def expected_loss_by_masks(model, x, y, p, loss_kind):
    """``E_delta[loss]`` summed directly over all ``2^L`` gate vectors."""
    n = model.depth
    total = 0.0
    for bits in itertools.product((0, 1), repeat=n):
        g = np.array(bits, dtype=np.int8)
        k = int(g.sum())
        prob = p**k * (1.0 - p) ** (n - k)
        if prob == 0.0:
            continue
        total += prob * float(np.mean(nx.per_sample_loss(loss_kind, model.forward(x, g), y)))
    return total


def verify_bound(model, x, y, p_grid, loss_kind="mse"):
    """Left and right sides of the bound at every ``p`` in ``p_grid``.

    The left side enumerates all gate vectors with their Bernoulli
    probabilities. The right side is reported both with and without the
    ``j = 0`` term.
    """
    if loss_kind not in nx.LOSS_KINDS:
        raise ContractError(f"bound needs a convex loss, one of {nx.LOSS_KINDS}")
    n = model.depth
    if n > EXACT_LIMIT:
        raise ContractError(f"exhaustive verification limited to {EXACT_LIMIT} layers")
    x = np.asarray(x, dtype=np.float64)
    _, size_pred_loss = _mask_tables(model, x, y, loss_kind)
    ps = np.asarray(p_grid, dtype=np.float64)
    lhs, full, tail = [], [], []
    for p in ps:
        w = binomial_weights(n, float(p))
        lhs.append(expected_loss_by_masks(model, x, y, float(p), loss_kind))
        full.append(float(w @ size_pred_loss))
        tail.append(float(w[1:] @ size_pred_loss[1:]))
    return BoundReport(ps, np.array(lhs), np.array(full), np.array(tail), 2**n)


def decomposition_check(model, x, y, p, loss_kind="mse"):
    """Both sides of ``E[loss] = sum_j w_j(p) E_{|delta|=j}[loss]``."""
    size_loss, _ = _mask_tables(model, x, y, loss_kind)
    w = binomial_weights(model.depth, p)
    return expected_loss_by_masks(model, x, y, p, loss_kind), float(w @ size_loss)


def random_model(rng, depth, width=4, input_dim=3, output_dim=2, rank=1, scale=1.0):
    """Small base network with non-zero random adapters, for bound checks."""
    from .adapters import AdapterPair, build_model

    model = build_model(rng, input_dim, [width] * depth, output_dim, rank=rank)
    adapters = [AdapterPair(rng.normal(0, scale, ad.a.shape), rng.normal(0, scale, ad.b.shape),
                            ad.alpha) for ad in model.adapters]
    return model.with_adapters(adapters)


def count_masks(n):
    return sum(math.comb(n, j) for j in range(n + 1))
