"""Structured (whole-adapter) and unstructured (magnitude) pruning."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .adapters import AdapterPair, ones_gates
from .errors import ContractError
from .trainer import evaluate

PATTERNS = ("every-other", "low", "middle", "high", "all", "custom")


@dataclass(frozen=True)
class PrunePattern:
    kind: str = "all"
    count: int = 4
    mask: tuple | None = None

    def __post_init__(self):
        if self.kind not in PATTERNS:
            raise ContractError(f"pattern must be one of {PATTERNS}")

    @property
    def name(self):
        return self.kind


def pattern_gates(pattern, n_layers):
    """Gate vector that switches off the layers named by ``pattern``."""
    gates = ones_gates(n_layers)
    k = pattern.count
    if pattern.kind in ("low", "middle", "high") and not 0 <= k <= n_layers:
        raise ContractError(f"cannot remove {k} of {n_layers} layers")
    if pattern.kind == "every-other":
        gates[1::2] = 0
    elif pattern.kind == "low":
        gates[:k] = 0
    elif pattern.kind == "middle":
        start = (n_layers - k) // 2
        gates[start:start + k] = 0
    elif pattern.kind == "high":
        gates[n_layers - k:] = 0
    elif pattern.kind == "custom":
        if pattern.mask is None or len(pattern.mask) != n_layers:
            raise ContractError(f"custom mask must have length {n_layers}")
        gates = np.asarray(pattern.mask, dtype=np.int8)
    return gates


def structured_prune(model, pattern):
    return pattern_gates(pattern, model.depth)


def _flat_parameters(model):
    for ad in model.adapters:
        if not isinstance(ad, AdapterPair):
            raise ContractError("unstructured pruning needs factored adapters")
    return [np.concatenate([ad.a.ravel(), ad.b.ravel()]) for ad in model.adapters]


def pruned_indices(model, fraction, per_layer=False):
    """Flat indices (layer-major, A before B, row-major) of entries to zero.

    Ranking is by absolute value with ties broken by that index order.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ContractError("sparsity must lie in [0, 1]")
    flats = _flat_parameters(model)
    if per_layer:
        picked, offset = [], 0
        for f in flats:
            k = math.floor(fraction * f.size)
            picked.append(offset + np.argsort(np.abs(f), kind="stable")[:k])
            offset += f.size
        return np.sort(np.concatenate(picked))
    allp = np.concatenate(flats)
    k = math.floor(fraction * allp.size)
    return np.sort(np.argsort(np.abs(allp), kind="stable")[:k])


def unstructured_prune(model, fraction, per_layer=False):
    """Copy of ``model`` with the smallest-magnitude adapter entries zeroed."""
    flats = _flat_parameters(model)
    allp = np.concatenate(flats)
    allp[pruned_indices(model, fraction, per_layer)] = 0.0
    adapters, offset = [], 0
    for ad in model.adapters:
        na, nb = ad.a.size, ad.b.size
        a = allp[offset:offset + na].reshape(ad.a.shape)
        b = allp[offset + na:offset + na + nb].reshape(ad.b.shape)
        adapters.append(AdapterPair(a, b, ad.alpha))
        offset += na + nb
    return model.with_adapters(adapters)


def prune_sweep(model, dataset, patterns=None, sparsities=None, per_layer=False,
                loss_kind=None):
    """Rows ``(setting, loss, accuracy)`` for each pattern and sparsity level."""
    rows = []
    for pattern in patterns or ():
        gates = structured_prune(model, pattern)
        rows.append((pattern.name, *evaluate(model, dataset, gates, loss_kind)))
    for s in sparsities or ():
        pruned = unstructured_prune(model, s, per_layer)
        rows.append((float(s), *evaluate(pruned, dataset, loss_kind=loss_kind)))
    return rows
