"""Two-model adapter merging by factor fusion or by delta ensembling.

Aligned fusion first reparameterizes the second model to shrink the gap
between the two.

``lam`` always weights the first model, so ``lam = 1`` returns model 1 and
``lam = 0`` returns model 2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adapters import AdapterPair, EnsembleAdapter
from .errors import ContractError, NumericError
from .trainer import evaluate

MERGE_MODES = ("fusion", "ensemble", "aligned-fusion")
CONDITION_LIMIT = 1e12


@dataclass(frozen=True)
class AlignSettings:
    steps: int = 500
    learning_rate: float = 0.1
    ridge: float = 1e-4
    max_halvings: int = 20


@dataclass(frozen=True)
class MergeSpec:
    mode: str = "fusion"
    lam: float = 0.5
    align: AlignSettings = AlignSettings()

    def __post_init__(self):
        if self.mode not in MERGE_MODES:
            raise ContractError(f"merge mode must be one of {MERGE_MODES}")
        if not 0.0 <= self.lam <= 1.0:
            raise ContractError("lambda must lie in [0, 1]")


@dataclass
class AlignmentResult:
    """Per-layer outcome of the alignment search."""

    p: np.ndarray
    objective_initial: float
    objective_final: float
    objectives: list           # accepted-step history, starts with the initial value
    p_norm2: float
    gap_spectral: float        # ||dW_f - dW_e||_2 after alignment
    gap_frobenius: float
    aborted: bool = False


def _check_pairs(m1, m2):
    if m1.depth != m2.depth:
        raise ContractError("models differ in depth")
    for i, (a, b) in enumerate(zip(m1.adapters, m2.adapters)):
        if not isinstance(a, AdapterPair) or not isinstance(b, AdapterPair):
            raise ContractError(f"layer {i + 1}: merging needs factored adapters")
        if a.a.shape != b.a.shape or a.b.shape != b.b.shape:
            raise ContractError(f"layer {i + 1}: rank or shape mismatch")
        if a.alpha != b.alpha:
            raise ContractError(f"layer {i + 1}: alpha mismatch ({a.alpha} vs {b.alpha})")
    for la, lb in zip(m1.layers, m2.layers):
        if la.shape != lb.shape:
            raise ContractError("models differ in architecture")


def fuse_pair(p1, p2, lam):
    """Factor interpolation; keeps rank ``r``."""
    return AdapterPair(lam * p1.a + (1.0 - lam) * p2.a,
                       lam * p1.b + (1.0 - lam) * p2.b, p1.alpha)


def weight_fusion(m1, m2, lam):
    """Model 1's base with per-layer fused factors."""
    _check_pairs(m1, m2)
    return m1.with_adapters(fuse_pair(a, b, lam) for a, b in zip(m1.adapters, m2.adapters))


def model_ensemble(m1, m2, lam):
    """Model 1's base with per-layer ``lam * dW_1 + (1 - lam) * dW_2``."""
    _check_pairs(m1, m2)
    return m1.with_adapters(EnsembleAdapter(a, b, lam) for a, b in zip(m1.adapters, m2.adapters))


def ensemble_deltas(m1, m2, lam):
    return [ad.delta() for ad in model_ensemble(m1, m2, lam).adapters]


# -- alignment -------------------------------------------------------------

def spectral_norm(m, tol=1e-8, max_iter=10_000):
    """Largest singular value by power iteration on ``m^T m``."""
    m = np.asarray(m, dtype=np.float64)
    if not np.any(m):
        return 0.0
    v = np.ones(m.shape[1]) / np.sqrt(m.shape[1])
    # a fixed start can be orthogonal to the top vector; perturb deterministically
    v += 1e-3 * np.cos(np.arange(m.shape[1]))
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(max_iter):
        w = m.T @ (m @ v)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
        new = np.sqrt(norm)
        if abs(new - sigma) <= tol * max(new, 1.0):
            return float(new)
        sigma = new
    return float(sigma)


def _align_terms(p, p1, p2, lam):
    q = np.linalg.solve(p, np.eye(p.shape[0]))
    bf = lam * p1.b + (1.0 - lam) * (p2.b @ p)
    af = lam * p1.a + (1.0 - lam) * (q @ p2.a)
    return q, bf, af


def alignment_objective(p, p1, p2, lam, ridge):
    """``||dW_f(P) - dW_e||_F^2 + ridge * ||P||_F^2`` for one layer."""
    _, bf, af = _align_terms(p, p1, p2, lam)
    target = lam * p1.delta() + (1.0 - lam) * p2.delta()
    d = p1.alpha * (bf @ af) - target
    return float(np.sum(d * d) + ridge * np.sum(p * p))


def alignment_gradient(p, p1, p2, lam, ridge):
    q, bf, af = _align_terms(p, p1, p2, lam)
    target = lam * p1.delta() + (1.0 - lam) * p2.delta()
    alpha = p1.alpha
    d = alpha * (bf @ af) - target
    g_bf = 2.0 * alpha * d @ af.T
    g_af = 2.0 * alpha * bf.T @ d
    g_q = (1.0 - lam) * g_af @ p2.a.T
    grad = (1.0 - lam) * p2.b.T @ g_bf - q.T @ g_q @ q.T
    return grad + 2.0 * ridge * p


def align_layer(p1, p2, lam, settings=AlignSettings()):
    """Gradient descent with backtracking on one layer's alignment matrix.

    When fusion already matches the ensemble at ``P = I`` (up to rounding)
    there is nothing to align and the ridge alone would only shrink ``P``,
    so the search is skipped.
    """
    r = p1.rank
    p = np.eye(r)
    obj = alignment_objective(p, p1, p2, lam, settings.ridge)
    history = [obj]
    lr = settings.learning_rate
    aborted = False
    _, bf, af = _align_terms(p, p1, p2, lam)
    target = lam * p1.delta() + (1.0 - lam) * p2.delta()
    already = np.linalg.norm(p1.alpha * (bf @ af) - target) <= 1e-12 * max(
        np.linalg.norm(target), np.finfo(float).tiny)
    for _ in range(0 if already else settings.steps):
        grad = alignment_gradient(p, p1, p2, lam, settings.ridge)
        if not np.any(grad):
            break
        accepted = False
        for _ in range(settings.max_halvings + 1):
            cand = p - lr * grad
            if np.linalg.cond(cand) > CONDITION_LIMIT:
                lr *= 0.5
                continue
            cand_obj = alignment_objective(cand, p1, p2, lam, settings.ridge)
            if np.isfinite(cand_obj) and cand_obj <= obj:
                accepted = True
                break
            lr *= 0.5
        if not accepted:
            aborted = np.linalg.cond(p - lr * grad) > CONDITION_LIMIT
            break
        p, obj = cand, cand_obj
        history.append(obj)
        lr *= 2.0  # let the step grow back after successful moves
    _, bf, af = _align_terms(p, p1, p2, lam)
    gap = p1.alpha * (bf @ af) - (lam * p1.delta() + (1.0 - lam) * p2.delta())
    return AlignmentResult(p, history[0], obj, history, spectral_norm(p),
                           spectral_norm(gap), float(np.linalg.norm(gap)), aborted)


def align(m1, m2, settings=AlignSettings(), lam=0.5):
    """Per-layer alignment matrices reparameterizing model 2 toward model 1."""
    _check_pairs(m1, m2)
    return [align_layer(a, b, lam, settings) for a, b in zip(m1.adapters, m2.adapters)]


def reparameterize(pair, p):
    """``(B P, P^-1 A)``; the product is unchanged up to rounding."""
    if np.linalg.cond(p) > CONDITION_LIMIT:
        raise NumericError("alignment matrix is numerically singular")
    q = np.linalg.solve(p, np.eye(p.shape[0]))
    return AdapterPair(q @ pair.a, pair.b @ p, pair.alpha)


def aligned_fusion(m1, m2, lam, settings=AlignSettings()):
    """Fuse after reparameterizing model 2 with learned ``P``.

    At ``lam`` in {0, 1} fusion and ensemble already coincide, so alignment
    is skipped and the source factors are returned unchanged.
    """
    _check_pairs(m1, m2)
    if lam in (0.0, 1.0):
        return weight_fusion(m1, m2, lam), None
    results = align(m1, m2, settings, lam)
    adapters = [fuse_pair(a, reparameterize(b, res.p), lam)
                for a, b, res in zip(m1.adapters, m2.adapters, results)]
    return m1.with_adapters(adapters), results


def merge(m1, m2, spec):
    if spec.mode == "fusion":
        return weight_fusion(m1, m2, spec.lam)
    if spec.mode == "ensemble":
        return model_ensemble(m1, m2, spec.lam)
    return aligned_fusion(m1, m2, spec.lam, spec.align)[0]


def interpolate_sweep(m1, m2, grid, dataset, mode="fusion", settings=AlignSettings(),
                      loss_kind=None):
    """Rows ``(lam, loss, accuracy)`` at ``lam = k / (grid - 1)``."""
    if grid < 2:
        raise ContractError("grid needs at least two points")
    rows = []
    for k in range(grid):
        lam = k / (grid - 1)
        merged = merge(m1, m2, MergeSpec(mode, lam, settings))
        loss, acc = evaluate(merged, dataset, loss_kind=loss_kind)
        rows.append((lam, loss, acc))
    return rows


def midpoint_drop(rows):
    """Mean endpoint accuracy minus accuracy at ``lam = 0.5``."""
    by_lam = {lam: acc for lam, _, acc in rows}
    if 0.5 not in by_lam:
        raise ContractError("sweep grid has no midpoint; use an odd grid")
    return 0.5 * (by_lam[0.0] + by_lam[1.0]) - by_lam[0.5]
